//! Experiment reports and their canonical JSON / CSV encodings.
//!
//! Canonical JSON has sorted keys, two-space indentation, integers printed
//! plainly and every float as nine significant digits in exponent form
//! (`5.00129571e-1`). Parsing and re-emitting a canonical report reproduces
//! it byte for byte.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::cost::{cost_report, CostModelSpec, CostReport};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::policy::{Policy, PreSelectionBudget, PruneConfig, RunMetrics};
use crate::selector::{AslConfig, SelectionDecision, VarianceSample};

/// The run settings echoed into a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub policy: Policy,
    pub num_layers: usize,
    pub seq_len: usize,
    pub kv_budget: Option<usize>,
    pub window_size: Option<usize>,
    pub kernel_size: Option<usize>,
    pub fixed_selection_layer: Option<usize>,
    pub min_layer: Option<usize>,
    pub lookback: Option<usize>,
    pub tau: Option<f64>,
    pub pre_selection: Option<PreSelectionBudget>,
}

impl ReportConfig {
    pub fn from_prune(cfg: &PruneConfig, num_layers: usize, seq_len: usize) -> Self {
        let pruned = cfg.policy != Policy::Full;
        Self {
            policy: cfg.policy,
            num_layers,
            seq_len,
            kv_budget: pruned.then_some(cfg.kv_budget),
            window_size: pruned.then_some(cfg.window_size),
            kernel_size: pruned.then_some(cfg.kernel_size),
            fixed_selection_layer: cfg.fixed_selection_layer,
            min_layer: cfg.asl.map(|a| a.min_layer),
            lookback: cfg.asl.map(|a| a.lookback),
            tau: cfg.asl.map(|a| a.tau),
            pre_selection: (cfg.policy.uses_fixed_layer() || cfg.policy.is_adaptive())
                .then_some(cfg.pre_selection),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: usize,
    pub cache_size: usize,
    pub relative_variance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ReportConfig,
    pub selection_layer: Option<usize>,
    pub selected_count: usize,
    pub fallback: bool,
    pub pass_count: u8,
    pub layers: Vec<LayerReport>,
    pub cost: Option<CostReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            other => Err(Error::Usage(format!("unknown report format '{other}'"))),
        }
    }
}

/// Cost block for one-pass policies; two-pass runs have none.
fn cost_block(
    config: &ReportConfig,
    selection_layer: Option<usize>,
    kv_heads: usize,
    head_dim: usize,
) -> Result<Option<CostReport>> {
    if config.policy.is_two_pass() {
        return Ok(None);
    }
    let l = config.num_layers;
    let n = config.seq_len;
    let k = config.kv_budget.map_or(n, |k| k.min(n));
    // Without a selection layer nothing is pruned during prefill.
    let sel = selection_layer.unwrap_or(l - 1);
    let lookback = config.lookback.unwrap_or(0);
    let spec = CostModelSpec {
        num_layers: l,
        selection_layer: sel as f64,
        min_layer: config.min_layer.unwrap_or(sel),
        lookback,
        kv_heads,
        head_dim,
        context_len: n,
        kv_budget: k,
        pool_width: config.kernel_size.unwrap_or(1),
        union_size: CostModelSpec::union_bound(k, lookback),
    };
    cost_report(&spec).map(Some)
}

fn per_layer(sizes: &[usize], log: &[VarianceSample]) -> Vec<LayerReport> {
    sizes
        .iter()
        .enumerate()
        .map(|(layer, &cache_size)| LayerReport {
            layer,
            cache_size,
            relative_variance: log.iter().find(|s| s.layer == layer).map(|s| s.relative),
        })
        .collect()
}

impl ExperimentReport {
    /// Report of a live run on the toy model.
    pub fn from_run(
        model: &ModelConfig,
        seq_len: usize,
        cfg: &PruneConfig,
        metrics: &RunMetrics,
    ) -> Result<Self> {
        let config = ReportConfig::from_prune(cfg, model.num_layers, seq_len);
        let cost = cost_block(
            &config,
            metrics.selection_layer,
            model.num_kv_heads,
            model.head_dim,
        )?;
        Ok(Self {
            selection_layer: metrics.selection_layer,
            selected_count: metrics.selected_positions.as_ref().map_or(0, Vec::len),
            fallback: metrics.fallback,
            pass_count: metrics.pass_count,
            layers: per_layer(&metrics.cache_sizes, &metrics.variance_log),
            cost,
            config,
        })
    }

    /// Report of a one-pass adaptive run reconstructed from its decision:
    /// cache sizes follow the policy contract.
    #[allow(clippy::too_many_arguments)]
    pub fn from_decision(
        asl: &AslConfig,
        num_layers: usize,
        seq_len: usize,
        kernel_size: Option<usize>,
        pre_selection: PreSelectionBudget,
        decision: &SelectionDecision,
        log: &[VarianceSample],
        head_shape: Option<(usize, usize)>,
    ) -> Result<Self> {
        let config = ReportConfig {
            policy: Policy::Asl,
            num_layers,
            seq_len,
            kv_budget: Some(asl.kv_budget),
            window_size: Some(asl.window_size),
            kernel_size,
            fixed_selection_layer: None,
            min_layer: Some(asl.min_layer),
            lookback: Some(asl.lookback),
            tau: Some(asl.tau),
            pre_selection: Some(pre_selection),
        };
        let bounded = asl.kv_budget.min(seq_len);
        let sizes: Vec<usize> = (0..num_layers)
            .map(|l| match pre_selection {
                PreSelectionBudget::Budget => bounded,
                PreSelectionBudget::Full if l <= decision.selection_layer => seq_len,
                PreSelectionBudget::Full => decision.selected_indices.len(),
            })
            .collect();
        let cost = match head_shape {
            Some((h, d)) => cost_block(&config, Some(decision.selection_layer), h, d)?,
            None => None,
        };
        Ok(Self {
            selection_layer: Some(decision.selection_layer),
            selected_count: decision.selected_indices.len(),
            fallback: decision.fallback,
            pass_count: 1,
            layers: per_layer(&sizes, log),
            cost,
            config,
        })
    }

    pub fn relative_variances(&self) -> Vec<Option<f64>> {
        self.layers.iter().map(|l| l.relative_variance).collect()
    }

    pub fn parse_json(bytes: &[u8]) -> Result<Self> {
        serde_json::from_slice(bytes).map_err(|e| Error::Format(format!("bad report: {e}")))
    }
}

/// Encodes a report as canonical JSON or per-layer CSV.
pub fn emit_report(report: &ExperimentReport, format: ReportFormat) -> Result<Vec<u8>> {
    match format {
        ReportFormat::Json => canonical_json(report),
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let csv_err = |e: csv::Error| Error::Format(e.to_string());
            w.write_record(["layer", "cache_size", "relative_variance"])
                .map_err(csv_err)?;
            for l in &report.layers {
                w.write_record([
                    l.layer.to_string(),
                    l.cache_size.to_string(),
                    l.relative_variance.map(format_float).unwrap_or_default(),
                ])
                .map_err(csv_err)?;
            }
            w.into_inner().map_err(|e| Error::Format(e.to_string()))
        }
    }
}

/// Canonical JSON encoding of any serializable value, newline-terminated.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let value = serde_json::to_value(value).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = String::new();
    write_canonical(&value, 0, &mut out);
    out.push('\n');
    Ok(out.into_bytes())
}

/// Nine significant digits in exponent form.
pub fn format_float(x: f64) -> String {
    format!("{x:.8e}")
}

fn write_canonical(v: &Value, indent: usize, out: &mut String) {
    let pad = |n: usize| "  ".repeat(n);
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => match (n.as_u64(), n.as_i64(), n.as_f64()) {
            (Some(u), _, _) => write!(out, "{u}").unwrap(),
            (_, Some(i), _) => write!(out, "{i}").unwrap(),
            (_, _, Some(f)) => out.push_str(&format_float(f)),
            _ => out.push_str(&n.to_string()),
        },
        Value::String(s) => out.push_str(&Value::String(s.clone()).to_string()),
        Value::Array(items) if items.is_empty() => out.push_str("[]"),
        Value::Array(items) => {
            out.push_str("[\n");
            for (i, item) in items.iter().enumerate() {
                out.push_str(&pad(indent + 1));
                write_canonical(item, indent + 1, out);
                out.push_str(if i + 1 < items.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad(indent));
            out.push(']');
        }
        Value::Object(map) if map.is_empty() => out.push_str("{}"),
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push_str("{\n");
            for (i, k) in keys.iter().enumerate() {
                out.push_str(&pad(indent + 1));
                out.push_str(&Value::String((*k).clone()).to_string());
                out.push_str(": ");
                write_canonical(&map[*k], indent + 1, out);
                out.push_str(if i + 1 < keys.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad(indent));
            out.push('}');
        }
    }
}
