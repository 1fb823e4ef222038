//! Closed-form prefill/decode/memory model of one-shot selection against
//! full attention. Work is in abstract units with constants dropped, so only
//! ratios are meaningful.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Model and run dimensions for the cost model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModelSpec {
    pub num_layers: usize,
    /// Selection layer; fractional to allow mean selection layers.
    pub selection_layer: f64,
    pub min_layer: usize,
    pub lookback: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub context_len: usize,
    pub kv_budget: usize,
    pub pool_width: usize,
    /// Top-k union size; [`CostModelSpec::union_bound`] when unknown.
    pub union_size: usize,
}

impl CostModelSpec {
    /// Upper bound `k · L_obs` on the union size.
    pub fn union_bound(kv_budget: usize, lookback: usize) -> usize {
        kv_budget * lookback
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.num_layers >= 1,
            Config,
            "layer count must be at least 1"
        );
        ensure!(
            self.selection_layer >= 0.0 && self.selection_layer < self.num_layers as f64,
            Config,
            "selection layer {} outside 0..{}",
            self.selection_layer,
            self.num_layers
        );
        ensure!(
            self.head_dim >= 1 && self.kv_heads >= 1,
            Config,
            "head shape must be positive"
        );
        ensure!(
            self.context_len >= 1 && self.kv_budget >= 1,
            Config,
            "n and k must be positive"
        );
        ensure!(
            self.kv_budget <= self.context_len,
            Config,
            "budget {} exceeds context {}",
            self.kv_budget,
            self.context_len
        );
        ensure!(
            self.pool_width >= 1,
            Config,
            "pooling width must be positive"
        );
        ensure!(
            self.union_size <= Self::union_bound(self.kv_budget, self.lookback),
            Config,
            "union size {} exceeds k·L_obs",
            self.union_size
        );
        Ok(())
    }
}

/// Non-attention prefill work, in abstract units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverheadTerms {
    pub pooling: f64,
    pub ranking: f64,
    pub variance: f64,
    pub topk: f64,
}

impl OverheadTerms {
    pub fn total(&self) -> f64 {
        self.pooling + self.ranking + self.variance + self.topk
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub ttft_ratio: f64,
    pub tpot_ratio: f64,
    pub memory_ratio: f64,
    /// Attention work of the pruned prefill.
    pub attention: f64,
    /// Attention work of full prefill.
    pub attention_full: f64,
    pub overhead: OverheadTerms,
}

/// Per-layer attention work `n²·d + n·d²`.
pub fn t_attn(n: usize, d: usize) -> f64 {
    let (n, d) = (n as f64, d as f64);
    n * n * d + n * d * d
}

/// Prefill time relative to full attention, ignoring the overhead terms.
pub fn ttft_ratio(spec: &CostModelSpec) -> f64 {
    let l = spec.num_layers as f64;
    let s = spec.selection_layer;
    (s + 1.0) / l
        + ((l - s - 1.0) / l)
            * (t_attn(spec.kv_budget, spec.head_dim) / t_attn(spec.context_len, spec.head_dim))
}

/// Decode time relative to full attention: `k / n`.
pub fn tpot_ratio(spec: &CostModelSpec) -> f64 {
    spec.kv_budget as f64 / spec.context_len as f64
}

/// KV plus pooled-score and rank-cache memory relative to full KV.
pub fn memory_ratio(spec: &CostModelSpec) -> f64 {
    let (l, h, d) = (
        spec.num_layers as f64,
        spec.kv_heads as f64,
        spec.head_dim as f64,
    );
    let (n, k) = (spec.context_len as f64, spec.kv_budget as f64);
    let overhead = 2.0 * spec.lookback as f64 * n / spec.pool_width as f64;
    (2.0 * l * h * d * k + overhead) / (2.0 * l * h * d * n)
}

/// Pooling, ranking, variance and final top-k work, with `log₂`.
pub fn overhead_terms(spec: &CostModelSpec) -> OverheadTerms {
    let monitored = (spec.selection_layer - spec.min_layer as f64).max(0.0);
    let n = spec.context_len as f64;
    let k = spec.kv_budget as f64;
    OverheadTerms {
        pooling: monitored * n,
        ranking: monitored * n * n.log2(),
        variance: monitored * spec.lookback as f64 * spec.union_size as f64,
        topk: n * k.log2().max(1.0),
    }
}

pub fn cost_report(spec: &CostModelSpec) -> Result<CostReport> {
    spec.validate()?;
    let l = spec.num_layers as f64;
    let s = spec.selection_layer;
    let full = t_attn(spec.context_len, spec.head_dim);
    Ok(CostReport {
        ttft_ratio: ttft_ratio(spec),
        tpot_ratio: tpot_ratio(spec),
        memory_ratio: memory_ratio(spec),
        attention: (s + 1.0) * full + (l - s - 1.0) * t_attn(spec.kv_budget, spec.head_dim),
        attention_full: l * full,
        overhead: overhead_terms(spec),
    })
}
