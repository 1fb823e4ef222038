//! Selection layer of the canonical fixture as the threshold varies.

use aslkv::harness::{canonical_asl, tau_sweep};
use aslkv::trace::{gen_trace, SyntheticTraceSpec};

fn main() -> aslkv::Result<()> {
    let trace = gen_trace(&SyntheticTraceSpec::canonical())?;
    let taus = [0.05, 0.1, 0.2, 0.3, 0.5, 0.7, 0.9, 1.5];
    for (tau, d) in tau_sweep(&trace, &canonical_asl(), &taus)? {
        let note = if d.fallback { " (fallback)" } else { "" };
        println!(
            "tau {tau:<5} -> layer {:>2}, relative {:.4}{note}",
            d.selection_layer, d.relative_variance_at_selection
        );
    }
    Ok(())
}
