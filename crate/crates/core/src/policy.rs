//! Prefill/decode drivers for each pruning policy.
//!
//! | policy      | passes | selection layer        | before selection          |
//! |-------------|--------|------------------------|---------------------------|
//! | `full`      | 1      | none                   | everything cached         |
//! | `snapkv`    | 1      | none                   | per-head top-k every layer|
//! | `fastkv`    | 1      | fixed                  | per `pre_selection`       |
//! | `asl`       | 1      | adaptive               | per `pre_selection`       |
//! | `gemfilter` | 2      | fixed                  | pass 2 over selected only |
//! | `asl_2pass` | 2      | adaptive               | pass 2 over selected only |
//!
//! In the one-pass drivers the selection layer itself attends over every
//! token; only layers after it see the selected subset.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cost::t_attn;
use crate::error::{ensure, Error, Result};
use crate::model::{
    LayerActivations, LayerDirective, LayerHook, LayerKVCache, Model, Retention, TokenSequence,
};
use crate::scoring::{compress_indices, pooled_scores, top_k_indices, ScoringConfig};
use crate::selector::{AslConfig, AslMonitor, VarianceSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Full,
    Snapkv,
    Fastkv,
    Gemfilter,
    Asl,
    Asl2pass,
}

impl Policy {
    pub const ALL: [Policy; 6] = [
        Policy::Full,
        Policy::Snapkv,
        Policy::Fastkv,
        Policy::Gemfilter,
        Policy::Asl,
        Policy::Asl2pass,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Full => "full",
            Policy::Snapkv => "snapkv",
            Policy::Fastkv => "fastkv",
            Policy::Gemfilter => "gemfilter",
            Policy::Asl => "asl",
            Policy::Asl2pass => "asl_2pass",
        }
    }

    pub fn uses_fixed_layer(self) -> bool {
        matches!(self, Policy::Fastkv | Policy::Gemfilter)
    }

    pub fn is_adaptive(self) -> bool {
        matches!(self, Policy::Asl | Policy::Asl2pass)
    }

    pub fn is_two_pass(self) -> bool {
        matches!(self, Policy::Gemfilter | Policy::Asl2pass)
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Policy::ALL
            .into_iter()
            .find(|p| p.name() == s || (s == "asl2pass" && *p == Policy::Asl2pass))
            .ok_or_else(|| Error::Usage(format!("unknown policy '{s}'")))
    }
}

/// Whether layers before the selection layer are compressed to the budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreSelectionBudget {
    Budget,
    Full,
}

impl FromStr for PreSelectionBudget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "budget" | "k" => Ok(Self::Budget),
            "full" => Ok(Self::Full),
            other => Err(Error::Usage(format!(
                "unknown pre-selection budget '{other}'"
            ))),
        }
    }
}

/// All pruning hyperparameters of one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub policy: Policy,
    pub kv_budget: usize,
    pub window_size: usize,
    pub kernel_size: usize,
    pub fixed_selection_layer: Option<usize>,
    pub asl: Option<AslConfig>,
    pub pre_selection: PreSelectionBudget,
}

impl PruneConfig {
    pub fn full() -> Self {
        Self {
            policy: Policy::Full,
            kv_budget: usize::MAX,
            window_size: 1,
            kernel_size: 1,
            fixed_selection_layer: None,
            asl: None,
            pre_selection: PreSelectionBudget::Full,
        }
    }

    pub fn snapkv(kv_budget: usize, window_size: usize, kernel_size: usize) -> Self {
        Self {
            policy: Policy::Snapkv,
            kv_budget,
            window_size,
            kernel_size,
            fixed_selection_layer: None,
            asl: None,
            pre_selection: PreSelectionBudget::Budget,
        }
    }

    /// FastKV or GemFilter at a fixed selection layer.
    pub fn fixed(
        policy: Policy,
        kv_budget: usize,
        window_size: usize,
        kernel_size: usize,
        layer: usize,
    ) -> Self {
        Self {
            policy,
            fixed_selection_layer: Some(layer),
            ..Self::snapkv(kv_budget, window_size, kernel_size)
        }
    }

    /// ASL or ASL_2pass; budget and window come from `asl`.
    pub fn adaptive(policy: Policy, asl: AslConfig, kernel_size: usize) -> Self {
        Self {
            policy,
            kv_budget: asl.kv_budget,
            window_size: asl.window_size,
            kernel_size,
            fixed_selection_layer: None,
            asl: Some(asl),
            pre_selection: PreSelectionBudget::Budget,
        }
    }

    pub fn with_pre_selection(mut self, pre: PreSelectionBudget) -> Self {
        self.pre_selection = pre;
        self
    }

    pub fn scoring(&self) -> ScoringConfig {
        ScoringConfig {
            window_size: self.window_size,
            kernel_size: self.kernel_size,
            kv_budget: self.kv_budget,
        }
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.policy == Policy::Full {
            return Ok(());
        }
        self.scoring().validate()?;
        match (self.policy.uses_fixed_layer(), self.fixed_selection_layer) {
            (true, None) => {
                return Err(Error::Config(format!(
                    "{} needs a fixed selection layer",
                    self.policy
                )));
            }
            (true, Some(l)) => ensure!(
                l < num_layers,
                Config,
                "selection layer {l} must be below the layer count {num_layers}"
            ),
            (false, Some(_)) => {
                return Err(Error::Config(format!(
                    "{} takes no fixed selection layer",
                    self.policy
                )));
            }
            (false, None) => {}
        }
        match (self.policy.is_adaptive(), &self.asl) {
            (true, None) => {
                return Err(Error::Config(format!("{} needs ASL settings", self.policy)))
            }
            (true, Some(a)) => {
                a.validate_for(num_layers)?;
                ensure!(
                    a.kv_budget == self.kv_budget && a.window_size == self.window_size,
                    Config,
                    "ASL budget/window disagree with the prune config"
                );
            }
            (false, Some(_)) => {
                return Err(Error::Config(format!(
                    "{} takes no ASL settings",
                    self.policy
                )));
            }
            (false, None) => {}
        }
        Ok(())
    }
}

/// Instrumentation collected over one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub policy: Policy,
    pub selection_layer: Option<usize>,
    /// Original positions carried past the selection layer.
    pub selected_positions: Option<Vec<usize>>,
    pub fallback: bool,
    /// Entries per head in each layer's cache after prefill.
    pub cache_sizes: Vec<usize>,
    /// Positions attended at each layer of the final pass.
    pub active_positions: Vec<Vec<usize>>,
    pub variance_log: Vec<VarianceSample>,
    /// Head-reduced pooled scores of every layer scored in the first pass.
    pub layer_scores: Vec<Option<Vec<f64>>>,
    /// `t_attn(active, d)` per layer, summed over passes.
    pub attention_work: Vec<f64>,
    pub pass_count: u8,
}

impl RunMetrics {
    /// Relative variance per layer, `None` where none was evaluated.
    pub fn relative_variances(&self) -> Vec<Option<f64>> {
        let mut out = vec![None; self.cache_sizes.len()];
        for s in &self.variance_log {
            if let Some(slot) = out.get_mut(s.layer) {
                *slot = Some(s.relative);
            }
        }
        out
    }
}

/// Prefill result of a policy run, ready for decoding.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub logits: Vec<f64>,
    pub caches: Vec<LayerKVCache>,
    pub metrics: RunMetrics,
}

impl RunOutput {
    /// One decode step; every layer cache grows by one entry.
    pub fn decode(&mut self, model: &Model, token: usize) -> Result<Vec<f64>> {
        let logits = model.decode_step(&mut self.caches, token)?;
        self.logits.clone_from(&logits);
        Ok(logits)
    }
}

/// SnapKV compression of one layer's cache. Identity when the budget covers
/// every position.
pub fn snapkv_compress(
    acts: &LayerActivations,
    positions: &[usize],
    cfg: &ScoringConfig,
    prompt_len: usize,
) -> Result<LayerKVCache> {
    cfg.validate()?;
    let retain = snap_retention(acts, cfg)?;
    let rows_for = |h: usize| -> Vec<usize> {
        match &retain {
            Retention::All => (0..positions.len()).collect(),
            Retention::PerHead(per) => per[h].clone(),
        }
    };
    let heads = (0..acts.k.len())
        .map(|h| {
            let rows = rows_for(h);
            crate::model::HeadCache {
                positions: rows.iter().map(|&r| positions[r]).collect(),
                keys: acts.k[h].select_rows(&rows),
                values: acts.v[h].select_rows(&rows),
            }
        })
        .collect();
    Ok(LayerKVCache {
        layer_index: acts.layer_index,
        heads,
        next_position: prompt_len,
    })
}

fn snap_retention(acts: &LayerActivations, cfg: &ScoringConfig) -> Result<Retention> {
    let n = acts.seq_len();
    if cfg.kv_budget >= n {
        return Ok(Retention::All);
    }
    let scores = pooled_scores(acts, cfg.window_size, cfg.kernel_size)?;
    Ok(Retention::PerHead(compress_indices(&scores, cfg, n)?))
}

/// Top `min(k, n) − W` past rows of the reduced scores plus the window rows.
fn one_shot_rows(reduced: &[f64], cfg: &ScoringConfig, n: usize) -> Result<Vec<usize>> {
    let mut rows = top_k_indices(reduced, cfg.kv_budget.min(n) - cfg.window_size)?;
    rows.extend(n - cfg.window_size..n);
    Ok(rows)
}

enum Mode {
    Full,
    Snapkv,
    Fixed { layer: usize },
    Adaptive(Box<AslMonitor>),
}

struct PolicyHook {
    cfg: PruneConfig,
    mode: Mode,
    /// Stop at the selection layer instead of continuing (two-pass probe).
    probe: bool,
    selected: Option<(usize, Vec<usize>)>,
    fallback: bool,
    layer_scores: Vec<Option<Vec<f64>>>,
}

impl PolicyHook {
    fn new(cfg: PruneConfig, num_layers: usize, probe: bool) -> Result<Self> {
        let mode = match cfg.policy {
            Policy::Full => Mode::Full,
            Policy::Snapkv => Mode::Snapkv,
            Policy::Fastkv | Policy::Gemfilter => Mode::Fixed {
                layer: cfg.fixed_selection_layer.expect("validated"),
            },
            Policy::Asl | Policy::Asl2pass => Mode::Adaptive(Box::new(AslMonitor::new(
                cfg.asl.expect("validated"),
                num_layers,
            )?)),
        };
        Ok(Self {
            cfg,
            mode,
            probe,
            selected: None,
            fallback: false,
            layer_scores: vec![None; num_layers],
        })
    }

    fn bounded_before_selection(&self) -> bool {
        !self.probe && self.cfg.pre_selection == PreSelectionBudget::Budget
    }

    fn select(
        &mut self,
        layer: usize,
        positions: &[usize],
        rows: Vec<usize>,
        retain: Retention,
    ) -> LayerDirective {
        self.selected = Some((layer, rows.iter().map(|&r| positions[r]).collect()));
        LayerDirective {
            retain,
            truncate_to: (!self.probe).then_some(rows),
            halt: self.probe,
        }
    }

    fn variance_log(&self) -> Vec<VarianceSample> {
        match &self.mode {
            Mode::Adaptive(m) => m.variance_log().to_vec(),
            _ => Vec::new(),
        }
    }
}

impl LayerHook for PolicyHook {
    fn on_layer(&mut self, acts: &LayerActivations, positions: &[usize]) -> Result<LayerDirective> {
        let layer = acts.layer_index;
        if self.selected.is_some() {
            return Ok(LayerDirective::keep_all());
        }
        let scoring = self.cfg.scoring();
        let n = acts.seq_len();
        let bounded = self.bounded_before_selection();
        match &mut self.mode {
            Mode::Full => Ok(LayerDirective::keep_all()),
            Mode::Snapkv => Ok(LayerDirective {
                retain: snap_retention(acts, &scoring)?,
                ..LayerDirective::keep_all()
            }),
            Mode::Fixed { layer: sel } if layer < *sel => Ok(LayerDirective {
                retain: if bounded {
                    snap_retention(acts, &scoring)?
                } else {
                    Retention::All
                },
                ..LayerDirective::keep_all()
            }),
            Mode::Fixed { .. } => {
                let rows = if scoring.kv_budget >= n {
                    (0..n).collect()
                } else {
                    let scores = pooled_scores(acts, scoring.window_size, scoring.kernel_size)?;
                    self.layer_scores[layer] = Some(scores.reduced.clone());
                    one_shot_rows(&scores.reduced, &scoring, n)?
                };
                // The selection layer caches the selected set itself.
                let retain = Retention::PerHead(vec![rows.clone(); acts.k.len()]);
                Ok(self.select(layer, positions, rows, retain))
            }
            Mode::Adaptive(monitor) => {
                ensure!(
                    n > scoring.window_size,
                    Argument,
                    "adaptive selection needs more than {} prompt tokens",
                    scoring.window_size
                );
                let need = monitor.wants_scores(layer) || bounded;
                let scores = if need {
                    Some(pooled_scores(
                        acts,
                        scoring.window_size,
                        scoring.kernel_size,
                    )?)
                } else {
                    None
                };
                let retain = match &scores {
                    Some(s) if bounded => Retention::PerHead(compress_indices(s, &scoring, n)?),
                    _ => Retention::All,
                };
                let reduced = scores.as_ref().map(|s| s.reduced.as_slice());
                if monitor.wants_scores(layer) {
                    self.layer_scores[layer] = reduced.map(<[f64]>::to_vec);
                }
                let decision = monitor.observe(layer, reduced)?.cloned();
                match decision {
                    Some(d) => {
                        self.fallback = d.fallback;
                        Ok(self.select(layer, positions, d.selected_indices, retain))
                    }
                    None => Ok(LayerDirective {
                        retain,
                        ..LayerDirective::keep_all()
                    }),
                }
            }
        }
    }
}

fn attention_work(active: &[Vec<usize>], d: usize) -> Vec<f64> {
    active.iter().map(|p| t_attn(p.len(), d)).collect()
}

/// Runs prefill under `cfg`.
pub fn run(model: &Model, tokens: &TokenSequence, cfg: &PruneConfig) -> Result<RunOutput> {
    let num_layers = model.config().num_layers;
    cfg.validate(num_layers)?;
    if cfg.policy.is_two_pass() {
        return run_two_pass(model, tokens, cfg);
    }
    let mut hook = PolicyHook::new(*cfg, num_layers, false)?;
    let out = model.prefill(tokens, &mut hook)?;
    let d = model.config().head_dim;
    let (selection_layer, selected_positions) = hook.selected.clone().unzip();
    Ok(RunOutput {
        logits: out.logits.expect("one-pass prefill completes"),
        metrics: RunMetrics {
            policy: cfg.policy,
            selection_layer,
            selected_positions,
            fallback: hook.fallback,
            cache_sizes: out.caches.iter().map(LayerKVCache::len).collect(),
            attention_work: attention_work(&out.active_positions, d),
            active_positions: out.active_positions,
            variance_log: hook.variance_log(),
            layer_scores: hook.layer_scores,
            pass_count: 1,
        },
        caches: out.caches,
    })
}

fn run_two_pass(model: &Model, tokens: &TokenSequence, cfg: &PruneConfig) -> Result<RunOutput> {
    let c = model.config();
    let mut probe = PolicyHook::new(*cfg, c.num_layers, true)?;
    let first = model.prefill(tokens, &mut probe)?;
    let (sel, selected) = probe
        .selected
        .clone()
        .ok_or_else(|| Error::State("first pass ended without a selection".into()))?;

    // Second pass over the selected subsequence; positions are compacted for
    // the forward pass and mapped back to the original prompt afterwards.
    let sub = tokens.select(&selected);
    let mut second = model.prefill(&sub, &mut crate::model::FullKv)?;
    for cache in &mut second.caches {
        for head in &mut cache.heads {
            for p in &mut head.positions {
                *p = selected[*p];
            }
        }
        cache.next_position = tokens.len();
    }
    let active: Vec<Vec<usize>> = second
        .active_positions
        .iter()
        .map(|ps| ps.iter().map(|&p| selected[p]).collect())
        .collect();
    let mut work = attention_work(&active, c.head_dim);
    for (w, extra) in work
        .iter_mut()
        .zip(attention_work(&first.active_positions, c.head_dim))
    {
        *w += extra;
    }
    Ok(RunOutput {
        logits: second.logits.expect("second pass completes"),
        metrics: RunMetrics {
            policy: cfg.policy,
            selection_layer: Some(sel),
            selected_positions: Some(selected),
            fallback: probe.fallback,
            cache_sizes: second.caches.iter().map(LayerKVCache::len).collect(),
            active_positions: active,
            variance_log: probe.variance_log(),
            layer_scores: probe.layer_scores,
            attention_work: work,
            pass_count: 2,
        },
        caches: second.caches,
    })
}

pub fn run_full(model: &Model, tokens: &TokenSequence) -> Result<RunOutput> {
    run(model, tokens, &PruneConfig::full())
}

pub fn run_snapkv(model: &Model, tokens: &TokenSequence, cfg: &PruneConfig) -> Result<RunOutput> {
    expect_policy(cfg, Policy::Snapkv)?;
    run(model, tokens, cfg)
}

pub fn run_fastkv(model: &Model, tokens: &TokenSequence, cfg: &PruneConfig) -> Result<RunOutput> {
    expect_policy(cfg, Policy::Fastkv)?;
    run(model, tokens, cfg)
}

pub fn run_asl(model: &Model, tokens: &TokenSequence, cfg: &PruneConfig) -> Result<RunOutput> {
    expect_policy(cfg, Policy::Asl)?;
    run(model, tokens, cfg)
}

pub fn run_gemfilter(
    model: &Model,
    tokens: &TokenSequence,
    cfg: &PruneConfig,
) -> Result<RunOutput> {
    expect_policy(cfg, Policy::Gemfilter)?;
    run(model, tokens, cfg)
}

pub fn run_asl_2pass(
    model: &Model,
    tokens: &TokenSequence,
    cfg: &PruneConfig,
) -> Result<RunOutput> {
    expect_policy(cfg, Policy::Asl2pass)?;
    run(model, tokens, cfg)
}

fn expect_policy(cfg: &PruneConfig, want: Policy) -> Result<()> {
    ensure!(
        cfg.policy == want,
        Config,
        "driver for {want} called with policy {}",
        cfg.policy
    );
    Ok(())
}
