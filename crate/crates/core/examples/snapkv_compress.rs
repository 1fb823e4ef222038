//! Per-head SnapKV retention on every layer of the toy model.

use aslkv::model::{Model, ModelConfig, TokenSequence};
use aslkv::policy::{self, PruneConfig};

fn main() -> aslkv::Result<()> {
    let model = Model::build(ModelConfig::small(4, 3))?;
    let tokens = TokenSequence::random(64, model.config().vocab_size, 4)?;
    let out = policy::run_snapkv(&model, &tokens, &PruneConfig::snapkv(16, 4, 5))?;
    for cache in &out.caches {
        println!("layer {}", cache.layer_index);
        for (h, head) in cache.heads.iter().enumerate() {
            println!("  head {h}: {:?}", head.positions);
        }
    }
    Ok(())
}
