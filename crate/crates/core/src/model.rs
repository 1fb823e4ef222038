//! A deterministic grouped-query-attention transformer small enough to run a
//! full prefill and decode on a laptop.
//!
//! The model has no positional encoding: attention is content-only and the
//! causal mask is evaluated on original token positions, so a pruned token
//! subsequence keeps its ordering semantics. Each layer is
//! `x += Attn(rms(x)); x += rms(x) · W_ffn` with a single linear FFN.
//!
//! Prefill exposes every layer's Q/K/V to a [`LayerHook`] before the layer's
//! attention is applied. The hook decides which positions each KV head keeps
//! in its cache and may truncate the set of positions that flows into deeper
//! layers, which is how all pruning policies are expressed.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::rng::SeededStream;
use crate::tensor::{dot, rms_norm, softmax_in_place, vec_mat, Matrix};

/// Shape and seed of a toy model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_q_heads: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
    pub hidden_dim: usize,
    pub vocab_size: usize,
    pub rng_seed: u64,
}

impl ModelConfig {
    /// A small default shape: 16 layers, 4 query heads over 2 KV heads.
    pub fn small(num_layers: usize, rng_seed: u64) -> Self {
        Self {
            num_layers,
            num_q_heads: 4,
            num_kv_heads: 2,
            head_dim: 16,
            hidden_dim: 64,
            vocab_size: 256,
            rng_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("num_layers", self.num_layers),
            ("num_q_heads", self.num_q_heads),
            ("num_kv_heads", self.num_kv_heads),
            ("head_dim", self.head_dim),
            ("hidden_dim", self.hidden_dim),
            ("vocab_size", self.vocab_size),
        ] {
            ensure!(v >= 1, Config, "{name} must be at least 1");
        }
        ensure!(
            self.num_q_heads.is_multiple_of(self.num_kv_heads),
            Config,
            "num_q_heads ({}) must be a multiple of num_kv_heads ({})",
            self.num_q_heads,
            self.num_kv_heads
        );
        Ok(())
    }

    /// GQA group size `H_q / H_k`.
    pub fn group_size(&self) -> usize {
        self.num_q_heads / self.num_kv_heads
    }
}

/// Prompt token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<usize>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, vocab_size: usize) -> Result<Self> {
        ensure!(
            !ids.is_empty(),
            Argument,
            "token sequence must be non-empty"
        );
        if let Some(&bad) = ids.iter().find(|&&t| t >= vocab_size) {
            return Err(Error::Argument(format!(
                "token id {bad} out of vocabulary of size {vocab_size}"
            )));
        }
        Ok(Self { ids })
    }

    /// `n` ids drawn uniformly from the vocabulary under `seed`.
    pub fn random(n: usize, vocab_size: usize, seed: u64) -> Result<Self> {
        ensure!(vocab_size >= 1, Argument, "vocabulary must be non-empty");
        let mut rng = SeededStream::new(seed ^ 0x746f_6b65_6e73);
        Self::new((0..n).map(|_| rng.below(vocab_size)).collect(), vocab_size)
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Sub-sequence at the given positions.
    pub fn select(&self, positions: &[usize]) -> Self {
        Self {
            ids: positions.iter().map(|&p| self.ids[p]).collect(),
        }
    }
}

/// Per-layer Q, K and V for the positions currently flowing through the layer.
/// Each head is an `active × head_dim` matrix.
#[derive(Debug, Clone)]
pub struct LayerActivations {
    pub layer_index: usize,
    pub q: Vec<Matrix>,
    pub k: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl LayerActivations {
    pub fn seq_len(&self) -> usize {
        self.k.first().map_or(0, Matrix::rows)
    }

    pub fn group_size(&self) -> usize {
        self.q.len() / self.k.len()
    }

    pub fn head_dim(&self) -> usize {
        self.k.first().map_or(0, Matrix::cols)
    }
}

/// Cached keys and values of one KV head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadCache {
    pub positions: Vec<usize>,
    pub keys: Matrix,
    pub values: Matrix,
}

impl HeadCache {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// KV cache of one layer: per-head retained positions with their K/V rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKVCache {
    pub layer_index: usize,
    pub heads: Vec<HeadCache>,
    /// Position the next decoded token will take.
    pub next_position: usize,
}

impl LayerKVCache {
    /// Entries per head; the largest head when heads differ.
    pub fn len(&self) -> usize {
        self.heads.iter().map(HeadCache::len).max().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.heads.iter().all(HeadCache::is_empty)
    }

    /// Sorted union of retained positions over all heads.
    pub fn retained_indices(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self
            .heads
            .iter()
            .flat_map(|h| h.positions.iter().copied())
            .collect();
        all.sort_unstable();
        all.dedup();
        all
    }

    /// True when every head retains the same positions.
    pub fn is_uniform(&self) -> bool {
        self.heads
            .windows(2)
            .all(|w| w[0].positions == w[1].positions)
    }
}

/// Which activation rows each KV head keeps in the cache.
#[derive(Debug, Clone, PartialEq)]
pub enum Retention {
    All,
    /// Ascending local row indices, one list per KV head.
    PerHead(Vec<Vec<usize>>),
}

/// What a hook tells prefill to do with the current layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerDirective {
    pub retain: Retention,
    /// Ascending local rows that continue to the next layer.
    pub truncate_to: Option<Vec<usize>>,
    /// Stop after this layer; no logits are produced.
    pub halt: bool,
}

impl LayerDirective {
    pub fn keep_all() -> Self {
        Self {
            retain: Retention::All,
            truncate_to: None,
            halt: false,
        }
    }
}

/// Per-layer consumer of attention inputs during prefill.
pub trait LayerHook {
    fn on_layer(&mut self, acts: &LayerActivations, positions: &[usize]) -> Result<LayerDirective>;
}

/// Hook that keeps everything: plain full-attention prefill.
pub struct FullKv;

impl LayerHook for FullKv {
    fn on_layer(&mut self, _: &LayerActivations, _: &[usize]) -> Result<LayerDirective> {
        Ok(LayerDirective::keep_all())
    }
}

impl<F> LayerHook for F
where
    F: FnMut(&LayerActivations, &[usize]) -> Result<LayerDirective>,
{
    fn on_layer(&mut self, acts: &LayerActivations, positions: &[usize]) -> Result<LayerDirective> {
        self(acts, positions)
    }
}

#[derive(Debug, Clone)]
pub struct PrefillOutput {
    /// Logits at the last prompt position; `None` when a hook halted the pass.
    pub logits: Option<Vec<f64>>,
    pub caches: Vec<LayerKVCache>,
    /// Positions processed by each executed layer.
    pub active_positions: Vec<Vec<usize>>,
    pub halted_at: Option<usize>,
}

#[derive(Debug, Clone)]
struct LayerWeights {
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    wf: Matrix,
}

/// Immutable model weights. Safe to share across concurrent runs.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    embed: Matrix,
    layers: Vec<LayerWeights>,
    unembed: Matrix,
}

impl Model {
    /// Fills every weight uniformly in `±1/√hidden_dim` from the seeded stream,
    /// in a fixed order, so equal configs produce bit-identical models.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededStream::new(config.rng_seed);
        let bound = 1.0 / (config.hidden_dim as f64).sqrt();
        let mut draw = |rows: usize, cols: usize| {
            Matrix::from_vec(
                rows,
                cols,
                (0..rows * cols).map(|_| rng.symmetric(bound)).collect(),
            )
        };
        let h = config.hidden_dim;
        let qd = config.num_q_heads * config.head_dim;
        let kd = config.num_kv_heads * config.head_dim;
        let embed = draw(config.vocab_size, h);
        let layers = (0..config.num_layers)
            .map(|_| LayerWeights {
                wq: draw(h, qd),
                wk: draw(h, kd),
                wv: draw(h, kd),
                wo: draw(qd, h),
                wf: draw(h, h),
            })
            .collect();
        let unembed = draw(h, config.vocab_size);
        Ok(Self {
            config,
            embed,
            layers,
            unembed,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn project(&self, x: &[f64], w: &Matrix, heads: usize) -> Vec<Vec<f64>> {
        let flat = vec_mat(x, w);
        flat.chunks(self.config.head_dim)
            .take(heads)
            .map(<[f64]>::to_vec)
            .collect()
    }

    fn activations(&self, layer: usize, normed: &[Vec<f64>]) -> LayerActivations {
        let c = &self.config;
        let w = &self.layers[layer];
        let d = c.head_dim;
        let mut q = vec![Matrix::zeros(0, d); c.num_q_heads];
        let mut k = vec![Matrix::zeros(0, d); c.num_kv_heads];
        let mut v = vec![Matrix::zeros(0, d); c.num_kv_heads];
        for x in normed {
            for (m, row) in q.iter_mut().zip(self.project(x, &w.wq, c.num_q_heads)) {
                m.push_row(&row);
            }
            for (m, row) in k.iter_mut().zip(self.project(x, &w.wk, c.num_kv_heads)) {
                m.push_row(&row);
            }
            for (m, row) in v.iter_mut().zip(self.project(x, &w.wv, c.num_kv_heads)) {
                m.push_row(&row);
            }
        }
        LayerActivations {
            layer_index: layer,
            q,
            k,
            v,
        }
    }

    /// Output projection, residual add and the linear FFN for one row.
    fn finish_row(&self, layer: usize, x: &mut [f64], head_out: &[f64]) {
        let w = &self.layers[layer];
        for (xi, a) in x.iter_mut().zip(vec_mat(head_out, &w.wo)) {
            *xi += a;
        }
        let f = vec_mat(&rms_norm(x), &w.wf);
        for (xi, a) in x.iter_mut().zip(f) {
            *xi += a;
        }
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        vec_mat(&rms_norm(x), &self.unembed)
    }

    fn check_finite(layer: usize, hidden: &[Vec<f64>]) -> Result<()> {
        if hidden.iter().flatten().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric(format!(
                "non-finite hidden state after layer {layer}"
            )))
        }
    }

    fn embed_row(&self, token: usize) -> Vec<f64> {
        self.embed.row(token).to_vec()
    }

    /// Runs the prompt through every layer, consulting `hook` once per layer.
    pub fn prefill(
        &self,
        tokens: &TokenSequence,
        hook: &mut dyn LayerHook,
    ) -> Result<PrefillOutput> {
        let (out, _) = self.run_prefill(tokens, hook)?;
        Ok(out)
    }

    /// Full-attention logits at every prompt position.
    pub fn forward_all(&self, tokens: &TokenSequence) -> Result<Vec<Vec<f64>>> {
        let (_, hidden) = self.run_prefill(tokens, &mut FullKv)?;
        Ok(hidden.iter().map(|x| self.logits(x)).collect())
    }

    fn run_prefill(
        &self,
        tokens: &TokenSequence,
        hook: &mut dyn LayerHook,
    ) -> Result<(PrefillOutput, Vec<Vec<f64>>)> {
        let c = &self.config;
        ensure!(
            !tokens.is_empty(),
            Argument,
            "prefill needs at least one token"
        );
        if let Some(&bad) = tokens.ids().iter().find(|&&t| t >= c.vocab_size) {
            return Err(Error::Argument(format!("token id {bad} out of vocabulary")));
        }
        let n = tokens.len();
        let mut positions: Vec<usize> = (0..n).collect();
        let mut hidden: Vec<Vec<f64>> = tokens.ids().iter().map(|&t| self.embed_row(t)).collect();
        let mut caches = Vec::with_capacity(c.num_layers);
        let mut active_positions = Vec::with_capacity(c.num_layers);

        for layer in 0..c.num_layers {
            let normed: Vec<Vec<f64>> = hidden.iter().map(|x| rms_norm(x)).collect();
            let acts = self.activations(layer, &normed);
            let directive = hook.on_layer(&acts, &positions)?;

            let heads_out = causal_attention(&acts.q, &acts.k, &acts.v, &positions);
            for (row, x) in hidden.iter_mut().enumerate() {
                let concat: Vec<f64> = heads_out
                    .iter()
                    .flat_map(|m| m.row(row).iter().copied())
                    .collect();
                self.finish_row(layer, x, &concat);
            }
            Self::check_finite(layer, &hidden)?;

            caches.push(build_cache(layer, &acts, &positions, &directive.retain, n)?);
            active_positions.push(positions.clone());

            if directive.halt {
                return Ok((
                    PrefillOutput {
                        logits: None,
                        caches,
                        active_positions,
                        halted_at: Some(layer),
                    },
                    hidden,
                ));
            }
            if let Some(keep) = directive.truncate_to {
                ensure!(
                    keep.windows(2).all(|w| w[0] < w[1])
                        && keep.last().is_none_or(|&l| l < positions.len()),
                    Argument,
                    "truncation rows must be ascending and in range"
                );
                ensure!(
                    !keep.is_empty(),
                    Argument,
                    "truncation must keep at least one row"
                );
                positions = keep.iter().map(|&i| positions[i]).collect();
                hidden = keep.iter().map(|&i| hidden[i].clone()).collect();
            }
        }
        let last = hidden.last().expect("at least one active row");
        let logits = self.logits(last);
        Ok((
            PrefillOutput {
                logits: Some(logits),
                caches,
                active_positions,
                halted_at: None,
            },
            hidden,
        ))
    }

    /// Feeds one token through every layer against the cached entries,
    /// appending its K/V to each head's cache.
    pub fn decode_step(&self, caches: &mut [LayerKVCache], token: usize) -> Result<Vec<f64>> {
        let c = &self.config;
        ensure!(
            caches.len() == c.num_layers,
            State,
            "expected {} layer caches, got {}",
            c.num_layers,
            caches.len()
        );
        if let Some(empty) = caches
            .iter()
            .find(|lc| lc.heads.iter().any(HeadCache::is_empty))
        {
            return Err(Error::State(format!(
                "empty KV cache at layer {}",
                empty.layer_index
            )));
        }
        ensure!(
            token < c.vocab_size,
            Argument,
            "token id {token} out of vocabulary"
        );
        let g = c.group_size();
        let scale = 1.0 / (c.head_dim as f64).sqrt();
        let mut x = self.embed_row(token);
        for (layer, cache) in caches.iter_mut().enumerate() {
            let w = &self.layers[layer];
            let xn = rms_norm(&x);
            let q = self.project(&xn, &w.wq, c.num_q_heads);
            let k = self.project(&xn, &w.wk, c.num_kv_heads);
            let v = self.project(&xn, &w.wv, c.num_kv_heads);
            let pos = cache.next_position;
            for (head, (kr, vr)) in cache.heads.iter_mut().zip(k.iter().zip(&v)) {
                head.positions.push(pos);
                head.keys.push_row(kr);
                head.values.push_row(vr);
            }
            cache.next_position += 1;

            let mut concat = Vec::with_capacity(c.num_q_heads * c.head_dim);
            for (h, qh) in q.iter().enumerate() {
                let head = &cache.heads[h / g];
                let mut probs: Vec<f64> = (0..head.len())
                    .map(|j| dot(qh, head.keys.row(j)) * scale)
                    .collect();
                softmax_in_place(&mut probs);
                let mut out = vec![0.0; c.head_dim];
                for (j, p) in probs.iter().enumerate() {
                    for (o, vv) in out.iter_mut().zip(head.values.row(j)) {
                        *o += p * vv;
                    }
                }
                concat.extend(out);
            }
            self.finish_row(layer, &mut x, &concat);
            if !x.iter().all(|v| v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite hidden state at decode layer {layer}"
                )));
            }
        }
        Ok(self.logits(&x))
    }
}

/// Causal grouped-query attention over rows at the given original positions.
/// Query head `h` reads KV head `h / G`. Returns one `rows × d` output per query head.
pub fn causal_attention(
    q: &[Matrix],
    k: &[Matrix],
    v: &[Matrix],
    positions: &[usize],
) -> Vec<Matrix> {
    let g = q.len() / k.len();
    let rows = positions.len();
    let d = k.first().map_or(0, Matrix::cols);
    let scale = 1.0 / (d as f64).sqrt();
    q.iter()
        .enumerate()
        .map(|(h, qh)| {
            let (kh, vh) = (&k[h / g], &v[h / g]);
            let mut out = Matrix::zeros(rows, d);
            let mut probs = vec![0.0; rows];
            for i in 0..rows {
                for (j, p) in probs.iter_mut().enumerate() {
                    *p = if positions[j] <= positions[i] {
                        dot(qh.row(i), kh.row(j)) * scale
                    } else {
                        f64::NEG_INFINITY
                    };
                }
                softmax_in_place(&mut probs);
                let o = out.row_mut(i);
                for (j, &p) in probs.iter().enumerate() {
                    if p != 0.0 {
                        for (oo, vv) in o.iter_mut().zip(vh.row(j)) {
                            *oo += p * vv;
                        }
                    }
                }
            }
            out
        })
        .collect()
}

fn build_cache(
    layer: usize,
    acts: &LayerActivations,
    positions: &[usize],
    retain: &Retention,
    prompt_len: usize,
) -> Result<LayerKVCache> {
    let all: Vec<usize> = (0..positions.len()).collect();
    let heads = (0..acts.k.len())
        .map(|h| {
            let rows = match retain {
                Retention::All => &all,
                Retention::PerHead(per) => {
                    let rows = per.get(h).ok_or_else(|| {
                        Error::Argument(format!("retention missing for KV head {h}"))
                    })?;
                    ensure!(
                        rows.windows(2).all(|w| w[0] < w[1])
                            && rows.last().is_none_or(|&l| l < positions.len()),
                        Argument,
                        "retained rows must be ascending and in range"
                    );
                    rows
                }
            };
            Ok(HeadCache {
                positions: rows.iter().map(|&i| positions[i]).collect(),
                keys: acts.k[h].select_rows(rows),
                values: acts.v[h].select_rows(rows),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LayerKVCache {
        layer_index: layer,
        heads,
        next_position: prompt_len,
    })
}
