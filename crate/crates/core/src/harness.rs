//! Replaying stored traces through the adaptive selector, threshold sweeps
//! and selection-layer histograms.

use std::collections::BTreeMap;

use crate::error::{ensure, Result};
use crate::policy::PreSelectionBudget;
use crate::report::ExperimentReport;
use crate::selector::{AslConfig, AslMonitor, SelectionDecision, VarianceSample};
use crate::trace::{gen_trace, ScoreTrace, SyntheticTraceSpec, TraceSource};

/// Selector settings paired with [`SyntheticTraceSpec::canonical`]:
/// budget 64, window 32, `L_min` 10, `L_obs` 8, `τ` 0.3.
pub fn canonical_asl() -> AslConfig {
    AslConfig {
        min_layer: 10,
        lookback: 8,
        tau: 0.3,
        kv_budget: 64,
        window_size: 32,
    }
}

/// Outcome of streaming a trace through the selector.
#[derive(Debug, Clone, PartialEq)]
pub struct Replay {
    pub decision: SelectionDecision,
    pub variance_log: Vec<VarianceSample>,
}

/// Feeds the trace layer by layer until the selector decides.
pub fn replay_decision(trace: &ScoreTrace, asl: &AslConfig) -> Result<Replay> {
    ensure!(
        asl.window_size == trace.window_size(),
        Config,
        "selector window {} does not match trace window {}",
        asl.window_size,
        trace.window_size()
    );
    let mut monitor = AslMonitor::new(*asl, trace.num_layers())?;
    for layer in 0..trace.num_layers() {
        let scores = monitor.wants_scores(layer).then(|| trace.layer(layer));
        if monitor.observe(layer, scores)?.is_some() {
            break;
        }
    }
    let decision = monitor
        .decision()
        .cloned()
        .expect("the selector always decides by the final layer");
    Ok(Replay {
        decision,
        variance_log: monitor.variance_log().to_vec(),
    })
}

/// Replays a trace into the same report a live one-pass adaptive run emits.
pub fn replay(
    trace: &ScoreTrace,
    asl: &AslConfig,
    pre_selection: PreSelectionBudget,
) -> Result<ExperimentReport> {
    let r = replay_decision(trace, asl)?;
    let (kernel, heads) = match &trace.header().source {
        TraceSource::Model { model, kernel_size } => (
            Some(*kernel_size),
            Some((model.num_kv_heads, model.head_dim)),
        ),
        TraceSource::Synthetic { .. } => (None, None),
    };
    ExperimentReport::from_decision(
        asl,
        trace.num_layers(),
        trace.seq_len(),
        kernel,
        pre_selection,
        &r.decision,
        &r.variance_log,
        heads,
    )
}

/// Selection layer for each threshold, in the given order.
pub fn tau_sweep(
    trace: &ScoreTrace,
    asl: &AslConfig,
    taus: &[f64],
) -> Result<Vec<(f64, SelectionDecision)>> {
    taus.iter()
        .map(|&tau| {
            let cfg = AslConfig { tau, ..*asl };
            Ok((tau, replay_decision(trace, &cfg)?.decision))
        })
        .collect()
}

/// Selection-layer counts over synthetic traces with seeds
/// `base.seed .. base.seed + count`.
pub fn selection_histogram(
    base: &SyntheticTraceSpec,
    asl: &AslConfig,
    count: u64,
) -> Result<BTreeMap<usize, usize>> {
    let mut hist = BTreeMap::new();
    for i in 0..count {
        let spec = SyntheticTraceSpec {
            seed: base.seed.wrapping_add(i),
            ..*base
        };
        let d = replay_decision(&gen_trace(&spec)?, asl)?.decision;
        *hist.entry(d.selection_layer).or_insert(0) += 1;
    }
    Ok(hist)
}
