//! Generates the canonical synthetic score trace, writes it to disk and
//! replays it through the selector.

use aslkv::harness::{canonical_asl, replay};
use aslkv::policy::PreSelectionBudget;
use aslkv::report::{emit_report, ReportFormat};
use aslkv::trace::{gen_trace, ScoreTrace, SyntheticTraceSpec};

fn main() -> aslkv::Result<()> {
    let trace = gen_trace(&SyntheticTraceSpec::canonical())?;
    let path = std::env::temp_dir().join("aslkv_canonical_trace.jsonl");
    trace.write(&path)?;
    let back = ScoreTrace::read(&path)?;
    assert_eq!(back, trace);

    let report = replay(&back, &canonical_asl(), PreSelectionBudget::Budget)?;
    print!(
        "{}",
        String::from_utf8(emit_report(&report, ReportFormat::Csv)?).unwrap()
    );
    println!("selection layer: {:?}", report.selection_layer);
    std::fs::remove_file(path)?;
    Ok(())
}
