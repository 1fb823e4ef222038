//! Brute-force reference implementations shared by the integration tests.
//! Nothing here calls the library's scoring or selector code.

#![allow(dead_code)]

use std::collections::BTreeSet;

use aslkv::model::{LayerActivations, LayerDirective, Model, TokenSequence};
use aslkv::selector::AslConfig;
use aslkv::tensor::Matrix;
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Selection layer of the canonical synthetic fixture at `τ = 0.3`, as
/// computed by [`oracle_replay`].
pub const CANONICAL_SELECTION_LAYER: usize = 21;

/// Query and key heads of one layer.
pub struct LayerQk {
    pub q: Vec<Matrix>,
    pub k: Vec<Matrix>,
}

/// Q/K of every layer from a full-attention prefill.
pub fn capture_qk(model: &Model, tokens: &TokenSequence) -> Vec<LayerQk> {
    let mut layers = Vec::new();
    let mut hook = |acts: &LayerActivations, _: &[usize]| {
        layers.push(LayerQk {
            q: acts.q.clone(),
            k: acts.k.clone(),
        });
        Ok(LayerDirective::keep_all())
    };
    model.prefill(tokens, &mut hook).unwrap();
    layers
}

/// Head-summed pooled window attention over past tokens, recomputed from
/// scratch for every query head.
///
/// Arithmetic follows the defined evaluation order (logits scaled by a
/// multiply, query heads summed within their KV group, then groups summed):
/// repeated tokens give bit-identical keys at layer 0, and exactly tied
/// scores must round the same way for ranks to agree.
pub fn oracle_scores(qk: &LayerQk, w: usize, kernel: usize) -> Vec<f64> {
    let n = qk.k[0].rows();
    let d = qk.k[0].cols();
    let g = qk.q.len() / qk.k.len();
    let past = n - w;
    let half = kernel / 2;
    let scale = 1.0 / (d as f64).sqrt();
    let pooled: Vec<Vec<f64>> =
        qk.q.iter()
            .enumerate()
            .map(|(h, q)| {
                let k = &qk.k[h / g];
                let mut hist = vec![0.0; past];
                for t in 0..w {
                    let qi = n - w + t;
                    let logits: Vec<f64> = (0..=qi)
                        .map(|j| (0..d).map(|c| q.get(qi, c) * k.get(j, c)).sum::<f64>() * scale)
                        .collect();
                    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for j in 0..past {
                        hist[j] += e[j] / z;
                    }
                }
                (0..past)
                    .map(|j| {
                        let mut acc = 0.0;
                        for i in j as isize - half as isize..=(j + half) as isize {
                            if i >= 0 && (i as usize) < past {
                                acc += hist[i as usize];
                            }
                        }
                        acc / kernel as f64
                    })
                    .collect()
            })
            .collect();
    let mut total = vec![0.0; past];
    for group in pooled.chunks(g) {
        let mut p = vec![0.0; past];
        for head in group {
            for j in 0..past {
                p[j] += head[j];
            }
        }
        for j in 0..past {
            total[j] += p[j];
        }
    }
    total
}

/// Rank of each entry by counting how many entries beat it; ties go to the
/// smaller index.
pub fn oracle_ranks(scores: &[f64]) -> Vec<usize> {
    (0..scores.len())
        .map(|i| {
            (0..scores.len())
                .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
                .count()
        })
        .collect()
}

pub fn oracle_union(rows: &[Vec<usize>], k: usize) -> BTreeSet<usize> {
    let mut u = BTreeSet::new();
    for row in rows {
        for (i, &r) in row.iter().enumerate() {
            if r < k {
                u.insert(i);
            }
        }
    }
    u
}

/// Mean over the union of each token's population rank variance, two-pass.
pub fn oracle_variance(rows: &[Vec<usize>], k: usize) -> f64 {
    let union = oracle_union(rows, k);
    let depth = rows.len() as f64;
    let mut acc = 0.0;
    for &i in &union {
        let mean = rows.iter().map(|r| r[i] as f64).sum::<f64>() / depth;
        acc += rows
            .iter()
            .map(|r| (r[i] as f64 - mean).powi(2))
            .sum::<f64>()
            / depth;
    }
    acc / union.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleRun {
    pub selection_layer: usize,
    pub fallback: bool,
    pub selected: Vec<usize>,
    /// `(layer, ranks)` for every recorded layer up to selection.
    pub ranks: Vec<(usize, Vec<usize>)>,
    /// `(layer, variance, relative)` for every evaluated layer.
    pub variances: Vec<(usize, f64, f64)>,
}

/// Walks the layers with the adaptive selection rule, starting the rank
/// history early enough that `L_min` sees a full lookback window.
pub fn oracle_replay(
    scores: impl Fn(usize) -> Vec<f64>,
    num_layers: usize,
    asl: &AslConfig,
) -> OracleRun {
    let start = asl.min_layer + 1 - asl.lookback;
    let mut run = OracleRun {
        selection_layer: 0,
        fallback: false,
        selected: Vec::new(),
        ranks: Vec::new(),
        variances: Vec::new(),
    };
    let mut init: Option<f64> = None;
    for layer in start..num_layers {
        run.ranks.push((layer, oracle_ranks(&scores(layer))));
        if layer < asl.min_layer {
            continue;
        }
        let rows: Vec<Vec<usize>> = run.ranks[run.ranks.len() - asl.lookback..]
            .iter()
            .map(|(_, r)| r.clone())
            .collect();
        let t = rows[0].len();
        let k = (asl.kv_budget - asl.window_size).min(t);
        let var = oracle_variance(&rows, k);
        let rel = match init {
            None => {
                init = Some(var);
                1.0
            }
            Some(0.0) => 0.0,
            Some(v) => var / v,
        };
        run.variances.push((layer, var, rel));
        let fires = rel < asl.tau;
        if fires || layer + 1 == num_layers {
            let last = &rows[rows.len() - 1];
            run.selected = (0..t)
                .filter(|&i| last[i] < k)
                .chain(t..t + asl.window_size)
                .collect();
            run.selection_layer = layer;
            run.fallback = !fires;
            break;
        }
    }
    run
}

pub fn chacha(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform permutation of `0..n` by Fisher-Yates.
pub fn permutation(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        p.swap(i, j);
    }
    p
}

pub fn below(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    lo + (rng.next_u64() % (hi - lo) as u64) as usize
}
