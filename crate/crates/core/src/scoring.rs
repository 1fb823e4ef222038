//! Observation-window attention scoring.
//!
//! The trailing `W` queries of a layer score every earlier token: windowed
//! causal softmax, a past-only column histogram, zero-padded box pooling,
//! and summation over each GQA group. The per-KV-head result drives
//! per-head KV compression; the head-reduced vector is ranked and pushed
//! into the [`RankCache`].

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::model::LayerActivations;
use crate::tensor::{dot, softmax_in_place, Matrix};

/// Observation window, pooling kernel and per-layer budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoringConfig {
    pub window_size: usize,
    pub kernel_size: usize,
    pub kv_budget: usize,
}

impl ScoringConfig {
    /// Window 32, kernel 7.
    pub const DEFAULT_WINDOW: usize = 32;
    pub const DEFAULT_KERNEL: usize = 7;

    pub fn new(window_size: usize, kernel_size: usize, kv_budget: usize) -> Result<Self> {
        let cfg = Self {
            window_size,
            kernel_size,
            kv_budget,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.window_size >= 1,
            Config,
            "window size must be at least 1"
        );
        ensure!(
            self.kernel_size >= 1 && self.kernel_size % 2 == 1,
            Config,
            "kernel size must be odd and at least 1, got {}",
            self.kernel_size
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
}

/// Pooled past-token scores of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledScores {
    pub layer_index: usize,
    /// `H_k × (n − W)`, summed over each query group.
    pub per_head: Vec<Vec<f64>>,
    /// Sum of `per_head` over heads, length `n − W`.
    pub reduced: Vec<f64>,
}

/// Descending-score ranks of one layer; rank 0 is the highest score.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankVector {
    pub layer_index: usize,
    pub ranks: Vec<usize>,
}

/// Rolling store of the most recent rank vectors, contiguous by layer.
#[derive(Debug, Clone)]
pub struct RankCache {
    capacity: usize,
    entries: VecDeque<RankVector>,
}

impl RankCache {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "rank cache capacity must be at least 1");
        Self {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends the next layer's ranks, evicting the oldest entry when full.
    pub fn push(&mut self, ranks: RankVector) -> Result<()> {
        if let Some(last) = self.entries.back() {
            ensure!(
                ranks.layer_index == last.layer_index + 1,
                State,
                "rank cache expects layer {}, got {}",
                last.layer_index + 1,
                ranks.layer_index
            );
            ensure!(
                ranks.ranks.len() == last.ranks.len(),
                State,
                "rank vector length changed from {} to {}",
                last.ranks.len(),
                ranks.ranks.len()
            );
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(ranks);
        Ok(())
    }

    pub fn get(&self, layer: usize) -> Option<&RankVector> {
        let first = self.entries.front()?.layer_index;
        layer.checked_sub(first).and_then(|i| self.entries.get(i))
    }

    /// Layer indices currently held, oldest first.
    pub fn layers(&self) -> Vec<usize> {
        self.entries.iter().map(|r| r.layer_index).collect()
    }

    /// The `depth` rank vectors ending at `layer`, oldest first.
    pub fn window(&self, layer: usize, depth: usize) -> Result<Vec<&RankVector>> {
        ensure!(
            depth <= layer + 1,
            State,
            "need {depth} layers of ranks ending at layer {layer}"
        );
        (layer + 1 - depth..=layer)
            .map(|l| {
                self.get(l)
                    .ok_or_else(|| Error::State(format!("rank cache is missing layer {l}")))
            })
            .collect()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

/// Softmax of the last `W` queries against all `n` keys, masking keys after
/// each query's own position. Returns one `W × n` matrix per query head.
pub fn window_attention(q_window: &[Matrix], k_full: &[Matrix]) -> Result<Vec<Matrix>> {
    ensure!(
        !k_full.is_empty() && !q_window.is_empty(),
        Argument,
        "no heads"
    );
    ensure!(
        q_window.len().is_multiple_of(k_full.len()),
        Argument,
        "{} query heads cannot be grouped over {} KV heads",
        q_window.len(),
        k_full.len()
    );
    let g = q_window.len() / k_full.len();
    let n = k_full[0].rows();
    let w = q_window[0].rows();
    let d = k_full[0].cols();
    ensure!(w >= 1, Argument, "empty observation window");
    ensure!(
        w <= n,
        Argument,
        "window ({w}) exceeds sequence length ({n})"
    );
    ensure!(
        q_window.iter().all(|m| m.rows() == w && m.cols() == d)
            && k_full.iter().all(|m| m.rows() == n && m.cols() == d),
        Argument,
        "inconsistent Q/K shapes"
    );
    let scale = 1.0 / (d as f64).sqrt();
    Ok(q_window
        .iter()
        .enumerate()
        .map(|(h, qh)| {
            let kh = &k_full[h / g];
            let mut a = Matrix::zeros(w, n);
            for t in 0..w {
                let limit = n - w + t;
                let row = a.row_mut(t);
                for (j, r) in row.iter_mut().enumerate() {
                    *r = if j <= limit {
                        dot(qh.row(t), kh.row(j)) * scale
                    } else {
                        f64::NEG_INFINITY
                    };
                }
                softmax_in_place(row);
            }
            a
        })
        .collect())
}

/// Column sums of each head's window attention over the `n − W` past tokens.
pub fn past_histogram(attn: &[Matrix], window: usize, n: usize) -> Result<Vec<Vec<f64>>> {
    ensure!(n > window, Argument, "need n > W, got n={n}, W={window}");
    attn.iter()
        .map(|a| {
            ensure!(
                a.rows() == window && a.cols() == n,
                Argument,
                "attention shape {}x{} does not match {window}x{n}",
                a.rows(),
                a.cols()
            );
            let mut u = vec![0.0; n - window];
            for t in 0..window {
                for (uj, aj) in u.iter_mut().zip(a.row(t)) {
                    *uj += aj;
                }
            }
            Ok(u)
        })
        .collect()
}

/// Stride-1 box filter of odd width `kernel`, zero-padded by `kernel / 2` on
/// both sides, dividing by `kernel` even where the window covers padding.
pub fn avg_pool_1d(u: &[f64], kernel: usize) -> Result<Vec<f64>> {
    ensure!(
        kernel >= 1 && kernel % 2 == 1,
        Argument,
        "pooling kernel must be odd and at least 1, got {kernel}"
    );
    ensure!(!u.is_empty(), Argument, "cannot pool an empty vector");
    let half = kernel / 2;
    let m = u.len();
    Ok((0..m)
        .map(|j| {
            let lo = j.saturating_sub(half);
            let hi = (j + half + 1).min(m);
            u[lo..hi].iter().sum::<f64>() / kernel as f64
        })
        .collect())
}

/// Sums pooled rows over each group of `group` consecutive query heads, then
/// over KV heads.
pub fn group_sum(layer_index: usize, pooled: &[Vec<f64>], group: usize) -> Result<PooledScores> {
    ensure!(group >= 1, Argument, "group size must be at least 1");
    ensure!(
        !pooled.is_empty() && pooled.len().is_multiple_of(group),
        Argument,
        "{} query heads do not split into groups of {group}",
        pooled.len()
    );
    let t = pooled[0].len();
    ensure!(
        pooled.iter().all(|r| r.len() == t),
        Argument,
        "ragged pooled rows"
    );
    let per_head: Vec<Vec<f64>> = pooled
        .chunks(group)
        .map(|heads| {
            let mut acc = vec![0.0; t];
            for h in heads {
                for (a, v) in acc.iter_mut().zip(h) {
                    *a += v;
                }
            }
            acc
        })
        .collect();
    let mut reduced = vec![0.0; t];
    for h in &per_head {
        for (a, v) in reduced.iter_mut().zip(h) {
            *a += v;
        }
    }
    Ok(PooledScores {
        layer_index,
        per_head,
        reduced,
    })
}

/// Token indices ordered by descending score, ties by smaller index.
pub fn order_desc(scores: &[f64]) -> Result<Vec<usize>> {
    ensure!(
        scores.iter().all(|s| !s.is_nan()),
        Data,
        "scores contain NaN"
    );
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // Stable sort keeps ascending index among equal scores.
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    Ok(order)
}

/// Rank of every token under [`order_desc`].
pub fn rank_desc(layer_index: usize, scores: &[f64]) -> Result<RankVector> {
    let order = order_desc(scores)?;
    let mut ranks = vec![0; scores.len()];
    for (r, &i) in order.iter().enumerate() {
        ranks[i] = r;
    }
    Ok(RankVector { layer_index, ranks })
}

/// Ascending indices of the `k` highest scores.
pub fn top_k_indices(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    let mut top = order_desc(scores)?;
    top.truncate(k);
    top.sort_unstable();
    Ok(top)
}

/// Windowed attention → histogram → pooling → group sum for one layer.
pub fn pooled_scores(
    acts: &LayerActivations,
    window: usize,
    kernel: usize,
) -> Result<PooledScores> {
    let n = acts.seq_len();
    ensure!(n > window, Argument, "need n > W, got n={n}, W={window}");
    let q_window: Vec<Matrix> = acts
        .q
        .iter()
        .map(|q| q.select_rows(&(n - window..n).collect::<Vec<_>>()))
        .collect();
    let attn = window_attention(&q_window, &acts.k)?;
    let hist = past_histogram(&attn, window, n)?;
    let pooled = hist
        .iter()
        .map(|u| avg_pool_1d(u, kernel))
        .collect::<Result<Vec<_>>>()?;
    group_sum(acts.layer_index, &pooled, acts.group_size())
}

/// Per-head retained rows: the top `min(budget, n) − W` past tokens of each
/// KV head's pooled scores followed by the `W` window rows, ascending.
pub fn compress_indices(
    scores: &PooledScores,
    cfg: &ScoringConfig,
    n: usize,
) -> Result<Vec<Vec<usize>>> {
    ensure!(
        cfg.kv_budget > cfg.window_size,
        Config,
        "kv budget ({}) must exceed the window size ({})",
        cfg.kv_budget,
        cfg.window_size
    );
    ensure!(n > cfg.window_size, Argument, "need n > W");
    let k = cfg.kv_budget.min(n) - cfg.window_size;
    scores
        .per_head
        .iter()
        .map(|p| {
            let mut idx = top_k_indices(p, k)?;
            idx.extend(n - cfg.window_size..n);
            Ok(idx)
        })
        .collect()
}

/// Per-KV-head compressed keys and values with their retained rows.
#[derive(Debug, Clone)]
pub struct CompressedKv {
    pub retained: Vec<Vec<usize>>,
    pub keys: Vec<Matrix>,
    pub values: Vec<Matrix>,
    pub scores: PooledScores,
}

/// Scores a layer, compresses its KV per head and records the layer's ranks
/// of the head-reduced scores in `rank_cache`.
pub fn get_ranks(
    acts: &LayerActivations,
    cfg: &ScoringConfig,
    rank_cache: &mut RankCache,
) -> Result<CompressedKv> {
    cfg.validate()?;
    let scores = pooled_scores(acts, cfg.window_size, cfg.kernel_size)?;
    let retained = compress_indices(&scores, cfg, acts.seq_len())?;
    rank_cache.push(rank_desc(acts.layer_index, &scores.reduced)?)?;
    let keys = acts
        .k
        .iter()
        .zip(&retained)
        .map(|(k, r)| k.select_rows(r))
        .collect();
    let values = acts
        .v
        .iter()
        .zip(&retained)
        .map(|(v, r)| v.select_rows(r))
        .collect();
    Ok(CompressedKv {
        retained,
        keys,
        values,
        scores,
    })
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::rng::SeededStream;

    fn rand_mat(rng: &mut SeededStream, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.symmetric(1.0)).collect())
    }

    fn acts(seed: u64, hq: usize, hk: usize, n: usize, d: usize) -> LayerActivations {
        let mut rng = SeededStream::new(seed);
        LayerActivations {
            layer_index: 0,
            q: (0..hq).map(|_| rand_mat(&mut rng, n, d)).collect(),
            k: (0..hk).map(|_| rand_mat(&mut rng, n, d)).collect(),
            v: (0..hk).map(|_| rand_mat(&mut rng, n, d)).collect(),
        }
    }

    #[test]
    fn zero_inputs_give_uniform_row() {
        let q = vec![Matrix::zeros(1, 2)];
        let k = vec![Matrix::zeros(3, 2)];
        let a = window_attention(&q, &k).unwrap();
        for v in a[0].row(0) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn causal_mask_on_window() {
        let q = vec![Matrix::zeros(2, 1)];
        let k = vec![Matrix::zeros(2, 1)];
        let a = window_attention(&q, &k).unwrap();
        assert_eq!(a[0].row(0), &[1.0, 0.0]);
        assert_eq!(a[0].row(1), &[0.5, 0.5]);
    }

    #[test]
    fn window_longer_than_sequence() {
        let q = vec![Matrix::zeros(4, 1)];
        let k = vec![Matrix::zeros(3, 1)];
        assert!(matches!(window_attention(&q, &k), Err(Error::Argument(_))));
    }

    // Naive per-entry softmax oracle.
    #[test]
    fn window_attention_matches_naive() {
        let a = acts(7, 2, 1, 5, 3);
        let qw: Vec<Matrix> = a.q.iter().map(|q| q.select_rows(&[3, 4])).collect();
        let got = window_attention(&qw, &a.k).unwrap();
        for h in 0..2 {
            for t in 0..2 {
                let abs = 3 + t;
                let logits: Vec<f64> = (0..=abs)
                    .map(|j| {
                        (0..3)
                            .map(|c| qw[h].get(t, c) * a.k[0].get(j, c))
                            .sum::<f64>()
                            / 3f64.sqrt()
                    })
                    .collect();
                let z: f64 = logits.iter().map(|l| l.exp()).sum();
                for j in 0..5 {
                    let want = if j <= abs { logits[j].exp() / z } else { 0.0 };
                    assert!((got[h].get(t, j) - want).abs() < 1e-9);
                }
                let s: f64 = got[h].row(t).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn histogram_w1_is_past_row() {
        let a = Matrix::from_rows(&[vec![0.1, 0.2, 0.3, 0.4]]);
        assert_eq!(past_histogram(&[a], 1, 4).unwrap()[0], vec![0.1, 0.2, 0.3]);
    }

    #[test]
    fn histogram_of_uniform_rows() {
        let n = 5;
        let a = Matrix::from_vec(2, n, vec![1.0 / n as f64; 2 * n]);
        let u = past_histogram(&[a], 2, n).unwrap();
        for v in &u[0] {
            assert!((v - 2.0 / n as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn histogram_needs_past() {
        let a = Matrix::zeros(2, 2);
        assert!(matches!(
            past_histogram(&[a], 2, 2),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn histogram_matches_double_loop() {
        let mut rng = SeededStream::new(3);
        let a = rand_mat(&mut rng, 3, 9);
        let got = past_histogram(std::slice::from_ref(&a), 3, 9).unwrap();
        for j in 0..6 {
            let mut want = 0.0;
            for t in 0..3 {
                want += a.get(t, j);
            }
            assert_eq!(got[0][j], want);
        }
    }

    #[test]
    fn pool_identity_and_box() {
        let u = vec![0.3, 0.1, 0.7];
        assert_eq!(avg_pool_1d(&u, 1).unwrap(), u);
        let got = avg_pool_1d(&[0.0, 0.0, 1.0, 0.0, 0.0], 3).unwrap();
        let third = 1.0 / 3.0;
        for (g, w) in got.iter().zip([0.0, third, third, third, 0.0]) {
            assert!((g - w).abs() < 1e-15);
        }
        assert!(matches!(avg_pool_1d(&u, 2), Err(Error::Argument(_))));
    }

    #[test]
    fn pool_matches_window_sums() {
        let mut rng = SeededStream::new(11);
        let u: Vec<f64> = (0..11).map(|_| rng.unit()).collect();
        let got = avg_pool_1d(&u, 7).unwrap();
        for j in 0..11i64 {
            let mut s = 0.0;
            for o in -3..=3 {
                let i = j + o;
                if (0..11).contains(&i) {
                    s += u[i as usize];
                }
            }
            assert!((got[j as usize] - s / 7.0).abs() < 1e-12);
        }
    }

    #[test]
    fn group_sum_cases() {
        let rows = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        let g1 = group_sum(0, &rows, 1).unwrap();
        assert_eq!(g1.per_head, rows);
        assert_eq!(g1.reduced, vec![4.0, 6.0]);
        let same = vec![vec![1.0, 2.0], vec![1.0, 2.0]];
        assert_eq!(
            group_sum(0, &same, 2).unwrap().per_head,
            vec![vec![2.0, 4.0]]
        );
        assert!(matches!(group_sum(0, &rows, 3), Err(Error::Argument(_))));
    }

    #[test]
    fn group_sum_matches_reshape() {
        let mut rng = SeededStream::new(5);
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..4).map(|_| rng.unit()).collect())
            .collect();
        let got = group_sum(0, &rows, 3).unwrap();
        for kv in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|g| rows[kv * 3 + g][j]).sum();
                assert!((got.per_head[kv][j] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn rank_examples() {
        assert_eq!(rank_desc(0, &[0.1, 0.9, 0.5]).unwrap().ranks, vec![2, 0, 1]);
        assert_eq!(rank_desc(0, &[1.0; 4]).unwrap().ranks, vec![0, 1, 2, 3]);
        assert!(matches!(
            rank_desc(0, &[0.0, f64::NAN]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn rank_cache_is_contiguous_and_bounded() {
        let mut c = RankCache::new(2);
        for l in 3..7 {
            c.push(RankVector {
                layer_index: l,
                ranks: vec![0, 1],
            })
            .unwrap();
            assert!(c.len() <= 2);
        }
        assert_eq!(c.layers(), vec![5, 6]);
        assert!(c
            .push(RankVector {
                layer_index: 9,
                ranks: vec![0, 1]
            })
            .is_err());
        assert!(c.window(6, 3).is_err());
        assert_eq!(c.window(6, 2).unwrap().len(), 2);
    }

    #[test]
    fn budget_equal_n_keeps_everything() {
        let a = acts(1, 4, 2, 8, 4);
        let cfg = ScoringConfig::new(2, 3, 8).unwrap();
        let mut cache = RankCache::new(4);
        let out = get_ranks(&a, &cfg, &mut cache).unwrap();
        for r in &out.retained {
            assert_eq!(r, &(0..8).collect::<Vec<_>>());
        }
        assert_eq!(out.keys[0], a.k[0]);
        assert_eq!(cache.len(), 1);
    }

    #[test]
    fn compress_keeps_top_past_plus_window() {
        let a = acts(2, 4, 2, 8, 4);
        let cfg = ScoringConfig::new(2, 3, 4).unwrap();
        let mut cache = RankCache::new(4);
        let out = get_ranks(&a, &cfg, &mut cache).unwrap();
        for (h, r) in out.retained.iter().enumerate() {
            assert_eq!(r.len(), 4);
            assert_eq!(&r[2..], &[6, 7]);
            // Oracle: the two largest pooled past scores of this head.
            let p = &out.scores.per_head[h];
            let mut idx: Vec<usize> = (0..6).collect();
            idx.sort_by(|&x, &y| p[y].partial_cmp(&p[x]).unwrap().then(x.cmp(&y)));
            let mut want = idx[..2].to_vec();
            want.sort_unstable();
            assert_eq!(&r[..2], want.as_slice());
        }
    }

    #[test]
    fn budget_not_above_window_rejected() {
        assert!(matches!(ScoringConfig::new(4, 3, 4), Err(Error::Config(_))));
        assert!(matches!(ScoringConfig::new(4, 4, 8), Err(Error::Config(_))));
        assert!(ScoringConfig::new(32, 7, 2048).is_ok());
    }
}
