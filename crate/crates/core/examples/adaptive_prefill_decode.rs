//! Adaptive selection during prefill, then a few greedy decode steps.

use aslkv::model::{Model, ModelConfig, TokenSequence};
use aslkv::policy::{self, Policy, PruneConfig};
use aslkv::selector::AslConfig;

fn argmax(x: &[f64]) -> usize {
    (0..x.len()).fold(0, |best, i| if x[i] > x[best] { i } else { best })
}

fn main() -> aslkv::Result<()> {
    let model = Model::build(ModelConfig::small(16, 7))?;
    let tokens = TokenSequence::random(256, model.config().vocab_size, 8)?;
    let asl = AslConfig {
        min_layer: 5,
        lookback: 4,
        tau: 0.3,
        kv_budget: 32,
        window_size: 8,
    };
    let mut out = policy::run(&model, &tokens, &PruneConfig::adaptive(Policy::Asl, asl, 7))?;

    let m = &out.metrics;
    match m.selection_layer {
        Some(l) if m.fallback => println!("no layer crossed tau; forced selection at layer {l}"),
        Some(l) => println!("selected at layer {l}"),
        None => unreachable!(),
    }
    for s in &m.variance_log {
        println!(
            "  layer {:>2}: variance {:>10.2}  relative {:.3}",
            s.layer, s.variance, s.relative
        );
    }
    println!(
        "kept positions: {:?}",
        m.selected_positions.as_deref().unwrap_or_default()
    );

    let mut next = argmax(&out.logits);
    for step in 0..4 {
        let logits = out.decode(&model, next)?;
        println!(
            "step {step}: token {next}, cache {} entries/head",
            out.caches[0].len()
        );
        next = argmax(&logits);
    }
    Ok(())
}
