//! Runs every policy on one prompt and compares cache sizes and work.

use aslkv::model::{Model, ModelConfig, TokenSequence};
use aslkv::policy::{self, Policy, PruneConfig};
use aslkv::selector::AslConfig;

fn main() -> aslkv::Result<()> {
    let model = Model::build(ModelConfig::small(12, 21))?;
    let tokens = TokenSequence::random(128, model.config().vocab_size, 22)?;
    let (k, w, s) = (24, 8, 5);
    let asl = AslConfig {
        min_layer: 3,
        lookback: 4,
        tau: 0.7,
        kv_budget: k,
        window_size: w,
    };
    let configs = [
        PruneConfig::full(),
        PruneConfig::snapkv(k, w, s),
        PruneConfig::fixed(Policy::Fastkv, k, w, s, 5),
        PruneConfig::fixed(Policy::Gemfilter, k, w, s, 5),
        PruneConfig::adaptive(Policy::Asl, asl, s),
        PruneConfig::adaptive(Policy::Asl2pass, asl, s),
    ];
    let full_work: f64 = policy::run_full(&model, &tokens)?
        .metrics
        .attention_work
        .iter()
        .sum();
    println!(
        "{:<10} {:>5} {:>6} {:>9} {:>10}",
        "policy", "sel", "passes", "kv/layer", "work/full"
    );
    for cfg in &configs {
        let m = policy::run(&model, &tokens, cfg)?.metrics;
        let work: f64 = m.attention_work.iter().sum();
        let sel = m.selection_layer.map_or("-".into(), |l| l.to_string());
        let kv = m.cache_sizes.iter().sum::<usize>() as f64 / m.cache_sizes.len() as f64;
        println!(
            "{:<10} {sel:>5} {:>6} {kv:>9.1} {:>10.3}",
            cfg.policy.name(),
            m.pass_count,
            work / full_work
        );
    }
    Ok(())
}
