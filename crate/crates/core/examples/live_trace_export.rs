//! Captures a score trace from the toy model and checks that replaying it
//! reproduces the live adaptive run's report.

use aslkv::harness::replay;
use aslkv::model::{Model, ModelConfig, TokenSequence};
use aslkv::policy::{self, Policy, PreSelectionBudget, PruneConfig};
use aslkv::report::{emit_report, ExperimentReport, ReportFormat};
use aslkv::selector::AslConfig;
use aslkv::trace::capture;

fn main() -> aslkv::Result<()> {
    let model = Model::build(ModelConfig::small(10, 5))?;
    let tokens = TokenSequence::random(96, model.config().vocab_size, 6)?;
    let asl = AslConfig {
        min_layer: 3,
        lookback: 3,
        tau: 0.5,
        kv_budget: 20,
        window_size: 8,
    };
    let cfg = PruneConfig::adaptive(Policy::Asl, asl, 5);

    let live = policy::run(&model, &tokens, &cfg)?;
    let live = ExperimentReport::from_run(model.config(), tokens.len(), &cfg, &live.metrics)?;
    let trace = capture(&model, &tokens, asl.window_size, 5)?;
    let replayed = replay(&trace, &asl, PreSelectionBudget::Budget)?;

    let a = emit_report(&live, ReportFormat::Json)?;
    let b = emit_report(&replayed, ReportFormat::Json)?;
    println!(
        "live selection {:?}, replay selection {:?}",
        live.selection_layer, replayed.selection_layer
    );
    println!("reports byte-identical: {}", a == b);
    Ok(())
}
