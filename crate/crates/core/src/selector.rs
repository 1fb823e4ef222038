//! Adaptive selection-layer decision.
//!
//! Over the last `L_obs` layers of ranks, take the union of every layer's
//! top-`k` tokens, average the per-token rank variance over that union, and
//! normalise by the value seen at the first evaluation layer `L_min`. The
//! first layer whose relative variance falls below `τ` becomes the selection
//! layer, and the latest layer's top-`k` plus the observation window are
//! carried forward.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::scoring::{rank_desc, RankCache, RankVector};

/// Hyperparameters of the adaptive selector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AslConfig {
    /// First layer at which the threshold is evaluated (`L_min`).
    pub min_layer: usize,
    /// Rank-history depth (`L_obs`).
    pub lookback: usize,
    /// Relative-variance threshold (`τ`).
    pub tau: f64,
    pub kv_budget: usize,
    pub window_size: usize,
}

impl AslConfig {
    pub const DEFAULT_LOOKBACK: usize = 8;
    pub const DEFAULT_TAU: f64 = 0.3;

    /// `L_min = ⌊L_model / 3⌋`, `L_obs = 8`, `τ = 0.3`.
    pub fn for_model(num_layers: usize, kv_budget: usize, window_size: usize) -> Self {
        Self {
            min_layer: num_layers / 3,
            lookback: Self::DEFAULT_LOOKBACK,
            tau: Self::DEFAULT_TAU,
            kv_budget,
            window_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.lookback >= 1, Config, "lookback must be at least 1");
        ensure!(
            self.min_layer + 1 >= self.lookback,
            Config,
            "min layer {} leaves no room for {} layers of rank history",
            self.min_layer,
            self.lookback
        );
        ensure!(
            self.tau.is_finite() && self.tau >= 0.0,
            Config,
            "tau must be finite and non-negative, got {}",
            self.tau
        );
        ensure!(
            self.window_size >= 1,
            Config,
            "window size must be at least 1"
        );
        ensure!(
            self.kv_budget > self.window_size,
            Config,
            "kv budget ({}) must exceed the window size ({})",
            self.kv_budget,
            self.window_size
        );
        Ok(())
    }

    /// Checks the model depth leaves at least one layer at or after `L_min`.
    pub fn validate_for(&self, num_layers: usize) -> Result<()> {
        self.validate()?;
        ensure!(
            num_layers > self.min_layer,
            Config,
            "model has {num_layers} layers but min layer is {}",
            self.min_layer
        );
        Ok(())
    }

    /// First layer whose ranks are recorded, so that a full lookback window
    /// exists at `L_min`.
    pub fn record_start(&self) -> usize {
        self.min_layer + 1 - self.lookback
    }
}

/// One evaluated layer: raw rank variance and its ratio to the initial one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceSample {
    pub layer: usize,
    pub variance: f64,
    pub relative: f64,
}

/// Initial variance plus the per-layer log of one run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VarianceState {
    init_var: Option<f64>,
    log: Vec<VarianceSample>,
}

impl VarianceState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn init_var(&self) -> Option<f64> {
        self.init_var
    }

    pub fn log(&self) -> &[VarianceSample] {
        &self.log
    }

    /// Ratio of `var` to the first variance seen. The first call returns 1.0.
    /// A zero initial variance makes every later ratio 0.
    pub fn relative_variance(&mut self, layer: usize, var: f64) -> f64 {
        let ratio = match self.init_var {
            None => {
                self.init_var = Some(var);
                1.0
            }
            Some(0.0) => 0.0,
            Some(init) => var / init,
        };
        self.log.push(VarianceSample {
            layer,
            variance: var,
            relative: ratio,
        });
        ratio
    }
}

/// The selection layer and the token set carried past it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionDecision {
    pub selection_layer: usize,
    /// Ascending past-token and window positions.
    pub selected_indices: Vec<usize>,
    pub relative_variance_at_selection: f64,
    /// The threshold was never crossed and selection was forced at the last layer.
    pub fallback: bool,
}

/// Sorted unique indices ranked below `k` in at least one row.
pub fn top_union(rank_window: &[&[usize]], k: usize) -> Result<Vec<usize>> {
    let t = rank_window.first().map_or(0, |r| r.len());
    ensure!(k <= t, Argument, "k ({k}) exceeds row length ({t})");
    ensure!(
        rank_window.iter().all(|r| r.len() == t),
        Argument,
        "ragged rank window"
    );
    let mut hit = vec![false; t];
    for row in rank_window {
        for (i, &r) in row.iter().enumerate() {
            if r < k {
                hit[i] = true;
            }
        }
    }
    Ok(hit
        .iter()
        .enumerate()
        .filter_map(|(i, &h)| h.then_some(i))
        .collect())
}

/// Mean over `union` of each token's population rank variance across rows.
///
/// Ranks are integers, so each token's `L²·Var` is accumulated exactly and a
/// single division produces the result.
pub fn rank_variance(rank_window: &[&[usize]], union: &[usize]) -> Result<f64> {
    ensure!(
        !union.is_empty(),
        Argument,
        "rank variance over an empty union"
    );
    ensure!(!rank_window.is_empty(), Argument, "empty rank window");
    let depth = rank_window.len() as u128;
    let mut numer: u128 = 0;
    for &t in union {
        let (mut s1, mut s2) = (0u128, 0u128);
        for row in rank_window {
            let r = *row
                .get(t)
                .ok_or_else(|| Error::Argument(format!("union index {t} out of range")))?
                as u128;
            s1 += r;
            s2 += r * r;
        }
        numer += depth * s2 - s1 * s1;
    }
    Ok(numer as f64 / (depth * depth * union.len() as u128) as f64)
}

/// Per-layer evaluation details.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub layer: usize,
    pub variance: f64,
    pub relative: f64,
    pub union_size: usize,
    /// Ascending top-`k` indices of the latest layer.
    pub latest_top: Vec<usize>,
    pub seq_len: usize,
}

/// Evaluates `layer` against the threshold state; `None` before `L_min`.
pub fn evaluate_layer(
    layer: usize,
    config: &AslConfig,
    rank_cache: &RankCache,
    state: &mut VarianceState,
) -> Result<Option<Evaluation>> {
    if layer < config.min_layer {
        return Ok(None);
    }
    let window = rank_cache.window(layer, config.lookback)?;
    let rows: Vec<&[usize]> = window.iter().map(|r| r.ranks.as_slice()).collect();
    let seq_len = rows[rows.len() - 1].len();
    ensure!(seq_len >= 1, State, "empty rank vectors");
    let k = (config.kv_budget - config.window_size).min(seq_len);
    let union = top_union(&rows, k)?;
    let variance = rank_variance(&rows, &union)?;
    let relative = state.relative_variance(layer, variance);
    let latest_top = rows[rows.len() - 1]
        .iter()
        .enumerate()
        .filter_map(|(i, &r)| (r < k).then_some(i))
        .collect();
    Ok(Some(Evaluation {
        layer,
        variance,
        relative,
        union_size: union.len(),
        latest_top,
        seq_len,
    }))
}

fn decide(eval: &Evaluation, window: usize, fallback: bool) -> SelectionDecision {
    let mut selected = eval.latest_top.clone();
    selected.extend(eval.seq_len..eval.seq_len + window);
    SelectionDecision {
        selection_layer: eval.layer,
        selected_indices: selected,
        relative_variance_at_selection: eval.relative,
        fallback,
    }
}

/// Returns a decision when `layer ≥ L_min` and the relative variance drops
/// below `τ`, clearing the rank cache.
pub fn select_tokens(
    layer: usize,
    config: &AslConfig,
    rank_cache: &mut RankCache,
    state: &mut VarianceState,
) -> Result<Option<SelectionDecision>> {
    config.validate()?;
    let Some(eval) = evaluate_layer(layer, config, rank_cache, state)? else {
        return Ok(None);
    };
    if eval.relative < config.tau {
        rank_cache.clear();
        Ok(Some(decide(&eval, config.window_size, false)))
    } else {
        Ok(None)
    }
}

/// Streaming selector fed one layer of head-reduced scores at a time.
///
/// Used identically by live prefill and by trace replay.
#[derive(Debug, Clone)]
pub struct AslMonitor {
    config: AslConfig,
    num_layers: usize,
    next_layer: usize,
    cache: RankCache,
    state: VarianceState,
    ranks: Vec<RankVector>,
    decision: Option<SelectionDecision>,
}

impl AslMonitor {
    pub fn new(config: AslConfig, num_layers: usize) -> Result<Self> {
        config.validate_for(num_layers)?;
        Ok(Self {
            config,
            num_layers,
            next_layer: 0,
            cache: RankCache::new(config.lookback),
            state: VarianceState::new(),
            ranks: Vec::new(),
            decision: None,
        })
    }

    pub fn config(&self) -> &AslConfig {
        &self.config
    }

    /// Whether `layer`'s scores feed the selector.
    pub fn wants_scores(&self, layer: usize) -> bool {
        self.decision.is_none() && layer >= self.config.record_start()
    }

    /// Advances one layer. Scores may be omitted for layers the monitor does
    /// not want. Returns the decision on the layer it is made; at the final
    /// layer a decision is forced if none was made.
    pub fn observe(
        &mut self,
        layer: usize,
        reduced: Option<&[f64]>,
    ) -> Result<Option<&SelectionDecision>> {
        ensure!(
            layer == self.next_layer,
            State,
            "expected layer {}, got {layer}",
            self.next_layer
        );
        ensure!(
            layer < self.num_layers,
            State,
            "layer {layer} beyond model depth"
        );
        self.next_layer += 1;
        if !self.wants_scores(layer) {
            return Ok(None);
        }
        let scores =
            reduced.ok_or_else(|| Error::State(format!("scores required at layer {layer}")))?;
        let ranks = rank_desc(layer, scores)?;
        self.cache.push(ranks.clone())?;
        self.ranks.push(ranks);

        let mut decision = select_tokens(layer, &self.config, &mut self.cache, &mut self.state)?;
        if decision.is_none() && layer + 1 == self.num_layers {
            let sample = *self
                .state
                .log()
                .last()
                .ok_or_else(|| Error::State("final layer was not evaluated".into()))?;
            let window = self.cache.window(layer, self.config.lookback)?;
            let seq_len = window[window.len() - 1].ranks.len();
            let k = (self.config.kv_budget - self.config.window_size).min(seq_len);
            let latest_top = window[window.len() - 1]
                .ranks
                .iter()
                .enumerate()
                .filter_map(|(i, &r)| (r < k).then_some(i))
                .collect();
            self.cache.clear();
            decision = Some(decide(
                &Evaluation {
                    layer,
                    variance: sample.variance,
                    relative: sample.relative,
                    union_size: 0,
                    latest_top,
                    seq_len,
                },
                self.config.window_size,
                true,
            ));
        }
        self.decision = decision;
        Ok(self.decision.as_ref())
    }

    pub fn decision(&self) -> Option<&SelectionDecision> {
        self.decision.as_ref()
    }

    pub fn variance_log(&self) -> &[VarianceSample] {
        self.state.log()
    }

    /// Every rank vector recorded, in layer order.
    pub fn recorded_ranks(&self) -> &[RankVector] {
        &self.ranks
    }

    pub fn rank_cache(&self) -> &RankCache {
        &self.cache
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededStream;

    fn perm(rng: &mut SeededStream, t: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..t).collect();
        for i in (1..t).rev() {
            p.swap(i, rng.below(i + 1));
        }
        p
    }

    fn cfg(min_layer: usize, lookback: usize, tau: f64) -> AslConfig {
        AslConfig {
            min_layer,
            lookback,
            tau,
            kv_budget: 6,
            window_size: 2,
        }
    }

    #[test]
    fn union_of_identical_rows_has_k() {
        let row = vec![3, 0, 2, 1, 4];
        let rows = [row.as_slice(), row.as_slice()];
        assert_eq!(top_union(&rows, 2).unwrap(), vec![1, 3]);
    }

    #[test]
    fn union_of_disjoint_tops() {
        let a = [0, 1, 2, 3];
        let b = [2, 3, 0, 1];
        assert_eq!(top_union(&[&a, &b], 2).unwrap(), vec![0, 1, 2, 3]);
        assert!(matches!(top_union(&[&a], 5), Err(Error::Argument(_))));
    }

    #[test]
    fn union_matches_set_oracle() {
        let mut rng = SeededStream::new(17);
        let rows: Vec<Vec<usize>> = (0..8).map(|_| perm(&mut rng, 40)).collect();
        let refs: Vec<&[usize]> = rows.iter().map(Vec::as_slice).collect();
        let got = top_union(&refs, 5).unwrap();
        let mut want = std::collections::BTreeSet::new();
        for r in &rows {
            for (i, &x) in r.iter().enumerate() {
                if x < 5 {
                    want.insert(i);
                }
            }
        }
        assert_eq!(got, want.into_iter().collect::<Vec<_>>());
    }

    #[test]
    fn variance_examples() {
        let a = [0, 1, 2];
        assert_eq!(rank_variance(&[&a, &a], &[0, 1, 2]).unwrap(), 0.0);
        let r0 = [0, 1];
        let r1 = [2, 1];
        assert_eq!(rank_variance(&[&r0, &r1], &[0]).unwrap(), 1.0);
        assert!(matches!(
            rank_variance(&[&r0], &[]),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn variance_matches_two_pass() {
        let mut rng = SeededStream::new(23);
        let rows: Vec<Vec<usize>> = (0..8).map(|_| perm(&mut rng, 30)).collect();
        let refs: Vec<&[usize]> = rows.iter().map(Vec::as_slice).collect();
        let union: Vec<usize> = (0..12).map(|i| i * 2 + 1).collect();
        let got = rank_variance(&refs, &union).unwrap();
        let mut acc = 0.0;
        for &t in &union {
            let xs: Vec<f64> = rows.iter().map(|r| r[t] as f64).collect();
            let m = xs.iter().sum::<f64>() / 8.0;
            acc += xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 8.0;
        }
        assert!((got - acc / 12.0).abs() < 1e-12);
    }

    #[test]
    fn relative_variance_sequence() {
        let mut s = VarianceState::new();
        assert_eq!(s.relative_variance(3, 5.0), 1.0);
        assert_eq!(s.init_var(), Some(5.0));
        assert_eq!(s.relative_variance(4, 2.0), 0.4);
        assert_eq!(s.init_var(), Some(5.0));

        let mut z = VarianceState::new();
        assert_eq!(z.relative_variance(0, 0.0), 1.0);
        assert_eq!(z.relative_variance(1, 3.0), 0.0);
    }

    fn fill(cache: &mut RankCache, rows: &[Vec<usize>]) {
        for (l, r) in rows.iter().enumerate() {
            cache
                .push(RankVector {
                    layer_index: l,
                    ranks: r.clone(),
                })
                .unwrap();
        }
    }

    #[test]
    fn high_tau_fires_at_min_layer() {
        let mut rng = SeededStream::new(1);
        let rows: Vec<Vec<usize>> = (0..3).map(|_| perm(&mut rng, 10)).collect();
        let mut cache = RankCache::new(3);
        fill(&mut cache, &rows);
        let mut st = VarianceState::new();
        let c = cfg(2, 3, 2.0);
        assert!(select_tokens(1, &c, &mut cache, &mut st).unwrap().is_none());
        let d = select_tokens(2, &c, &mut cache, &mut st).unwrap().unwrap();
        assert_eq!(d.selection_layer, 2);
        assert_eq!(d.relative_variance_at_selection, 1.0);
        assert_eq!(d.selected_indices.len(), 6);
        assert_eq!(&d.selected_indices[4..], &[10, 11]);
        assert!(cache.is_empty());
    }

    #[test]
    fn zero_tau_never_fires() {
        let mut rng = SeededStream::new(2);
        let rows: Vec<Vec<usize>> = (0..5).map(|_| perm(&mut rng, 10)).collect();
        let mut cache = RankCache::new(2);
        fill(&mut cache, &rows[..4]);
        let mut st = VarianceState::new();
        let c = cfg(3, 2, 0.0);
        assert!(select_tokens(3, &c, &mut cache, &mut st).unwrap().is_none());
        cache
            .push(RankVector {
                layer_index: 4,
                ranks: rows[4].clone(),
            })
            .unwrap();
        assert!(select_tokens(4, &c, &mut cache, &mut st).unwrap().is_none());
    }

    #[test]
    fn missing_history_is_state_error() {
        let mut cache = RankCache::new(3);
        cache
            .push(RankVector {
                layer_index: 2,
                ranks: vec![0, 1, 2],
            })
            .unwrap();
        let mut st = VarianceState::new();
        assert!(matches!(
            select_tokens(2, &cfg(2, 3, 0.5), &mut cache, &mut st),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn config_rules() {
        assert!(cfg(6, 8, 0.3).validate().is_err());
        assert!(cfg(7, 8, 0.3).validate().is_ok());
        assert!(cfg(7, 8, -0.1).validate().is_err());
        let d = AslConfig::for_model(32, 2048, 32);
        assert_eq!((d.min_layer, d.lookback, d.tau), (10, 8, 0.3));
        assert_eq!(AslConfig::for_model(28, 2048, 32).min_layer, 9);
        assert_eq!(d.record_start(), 3);
        assert!(d.validate_for(10).is_err());
    }

    #[test]
    fn monitor_falls_back_at_final_layer() {
        let mut rng = SeededStream::new(3);
        let c = cfg(2, 2, 0.0);
        let mut m = AslMonitor::new(c, 5).unwrap();
        for l in 0..5 {
            let s: Vec<f64> = (0..10).map(|_| rng.unit()).collect();
            let wants = m.wants_scores(l);
            assert_eq!(wants, l >= 1);
            let d = m
                .observe(l, wants.then_some(s.as_slice()))
                .unwrap()
                .cloned();
            assert_eq!(d.is_some(), l == 4);
        }
        let d = m.decision().unwrap();
        assert!(d.fallback);
        assert_eq!(d.selection_layer, 4);
        assert_eq!(d.selected_indices.len(), 6);
        assert_eq!(m.variance_log().len(), 3);
        assert_eq!(m.variance_log()[0].relative, 1.0);
    }
}
