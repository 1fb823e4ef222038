//! Prefill, decode and memory ratios of one-shot selection at 128K context.

use aslkv::cost::{cost_report, CostModelSpec};

fn main() -> aslkv::Result<()> {
    println!("{:>4} {:>8} {:>8} {:>8}", "sel", "ttft", "tpot", "memory");
    for sel in [4.0, 8.0, 15.0, 20.8, 31.0] {
        let spec = CostModelSpec {
            num_layers: 32,
            selection_layer: sel,
            min_layer: 8,
            lookback: 8,
            kv_heads: 8,
            head_dim: 128,
            context_len: 131_072,
            kv_budget: 2048,
            pool_width: 7,
            union_size: CostModelSpec::union_bound(2048, 8),
        };
        let r = cost_report(&spec)?;
        println!(
            "{sel:>4} {:>8.4} {:>8.4} {:>8.4}",
            r.ttft_ratio, r.tpot_ratio, r.memory_ratio
        );
    }
    Ok(())
}
