//! Distribution of selection layers over independently seeded fixtures.

use aslkv::harness::{canonical_asl, selection_histogram};
use aslkv::trace::SyntheticTraceSpec;

fn main() -> aslkv::Result<()> {
    let count = 50;
    let hist = selection_histogram(&SyntheticTraceSpec::canonical(), &canonical_asl(), count)?;
    for (layer, n) in hist {
        println!("layer {layer:>2} {:>3} {}", n, "#".repeat(n));
    }
    Ok(())
}
