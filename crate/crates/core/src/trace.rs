//! Score traces: per-layer head-reduced pooled scores, replayable without a
//! model.
//!
//! On disk a trace is line-delimited JSON. The first line is a header, then
//! one record per layer in order:
//!
//! ```text
//! {"format":"aslkv-trace","version":1,"num_layers":32,"seq_len":512,"window_size":32,"source":{...}}
//! {"layer":0,"scores":[1.0123,0.9981,...]}
//! {"layer":1,"scores":[...]}
//! ```
//!
//! Scores are `f64` written in shortest round-trip form, so
//! `write(read(bytes)) == bytes` for any valid trace.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::model::{LayerActivations, LayerDirective, Model, ModelConfig, TokenSequence};
use crate::rng::SeededStream;
use crate::scoring::pooled_scores;

pub const TRACE_FORMAT: &str = "aslkv-trace";
pub const TRACE_VERSION: u32 = 1;

/// Parameters of the three-phase synthetic score generator.
///
/// Layers before `uniform_until` score every token as `1 + noise·ε`. Between
/// `uniform_until` and `localize_from` a fixed focus set gains a linearly
/// ramping boost of up to `sharpness`; from `localize_from` on the boost is
/// full and the noise shrinks by `noise_decay` per layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTraceSpec {
    pub num_layers: usize,
    pub seq_len: usize,
    pub window_size: usize,
    pub uniform_until: usize,
    pub localize_from: usize,
    pub focus_size: usize,
    pub sharpness: f64,
    pub noise: f64,
    pub noise_decay: f64,
    pub seed: u64,
}

impl SyntheticTraceSpec {
    /// 32 layers, n = 512, W = 32, uniform until 12, localized from 18, seed 42.
    pub fn canonical() -> Self {
        Self {
            num_layers: 32,
            seq_len: 512,
            window_size: 32,
            uniform_until: 12,
            localize_from: 18,
            focus_size: 32,
            sharpness: 24.0,
            noise: 1.0,
            noise_decay: 0.5,
            seed: 42,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.num_layers >= 1, Argument, "need at least one layer");
        ensure!(
            self.seq_len > self.window_size && self.window_size >= 1,
            Argument,
            "need seq_len > window_size >= 1"
        );
        ensure!(
            self.uniform_until <= self.localize_from && self.localize_from < self.num_layers,
            Argument,
            "need uniform_until ({}) <= localize_from ({}) < num_layers ({})",
            self.uniform_until,
            self.localize_from,
            self.num_layers
        );
        ensure!(
            self.focus_size <= self.seq_len - self.window_size,
            Argument,
            "focus set ({}) larger than the past context ({})",
            self.focus_size,
            self.seq_len - self.window_size
        );
        ensure!(
            self.sharpness.is_finite() && self.sharpness >= 0.0,
            Argument,
            "sharpness must be finite and non-negative"
        );
        ensure!(
            (0.0..=1.0).contains(&self.noise),
            Argument,
            "noise must lie in [0, 1]"
        );
        ensure!(
            (0.0..=1.0).contains(&self.noise_decay),
            Argument,
            "noise decay must lie in [0, 1]"
        );
        Ok(())
    }

    fn localization(&self, layer: usize) -> f64 {
        if layer < self.uniform_until {
            0.0
        } else if layer >= self.localize_from {
            1.0
        } else {
            (layer - self.uniform_until) as f64 / (self.localize_from - self.uniform_until) as f64
        }
    }

    fn noise_at(&self, layer: usize) -> f64 {
        if layer < self.localize_from {
            self.noise
        } else {
            self.noise
                * self
                    .noise_decay
                    .powi((layer - self.localize_from + 1) as i32)
        }
    }
}

/// Where a trace came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceSource {
    Synthetic {
        spec: SyntheticTraceSpec,
    },
    Model {
        model: ModelConfig,
        kernel_size: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub format: String,
    pub version: u32,
    pub num_layers: usize,
    pub seq_len: usize,
    pub window_size: usize,
    pub source: TraceSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerRecord {
    layer: usize,
    scores: Vec<f64>,
}

/// Per-layer reduced score vectors of length `seq_len − window_size`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTrace {
    header: TraceHeader,
    layers: Vec<Vec<f64>>,
}

impl ScoreTrace {
    pub fn new(
        num_layers: usize,
        seq_len: usize,
        window_size: usize,
        source: TraceSource,
        layers: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let trace = Self {
            header: TraceHeader {
                format: TRACE_FORMAT.to_string(),
                version: TRACE_VERSION,
                num_layers,
                seq_len,
                window_size,
                source,
            },
            layers,
        };
        trace.validate().map_err(|e| match e {
            Error::Format(m) => Error::Argument(m),
            other => other,
        })?;
        Ok(trace)
    }

    fn validate(&self) -> Result<()> {
        let h = &self.header;
        ensure!(
            h.format == TRACE_FORMAT,
            Format,
            "unknown trace format '{}'",
            h.format
        );
        ensure!(
            h.version == TRACE_VERSION,
            Format,
            "unsupported trace version {} (expected {TRACE_VERSION})",
            h.version
        );
        ensure!(
            h.seq_len > h.window_size,
            Format,
            "trace needs seq_len > window_size"
        );
        ensure!(
            self.layers.len() == h.num_layers,
            Format,
            "trace declares {} layers but holds {}",
            h.num_layers,
            self.layers.len()
        );
        let t = h.seq_len - h.window_size;
        for (l, s) in self.layers.iter().enumerate() {
            ensure!(
                s.len() == t,
                Format,
                "layer {l} has {} scores, expected {t}",
                s.len()
            );
            ensure!(
                s.iter().all(|v| v.is_finite()),
                Format,
                "layer {l} has non-finite scores"
            );
        }
        Ok(())
    }

    pub fn header(&self) -> &TraceHeader {
        &self.header
    }

    pub fn num_layers(&self) -> usize {
        self.header.num_layers
    }

    pub fn seq_len(&self) -> usize {
        self.header.seq_len
    }

    pub fn window_size(&self) -> usize {
        self.header.window_size
    }

    pub fn layer(&self, l: usize) -> &[f64] {
        &self.layers[l]
    }

    pub fn layers(&self) -> &[Vec<f64>] {
        &self.layers
    }

    /// Multiplies every score by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            header: self.header.clone(),
            layers: self
                .layers
                .iter()
                .map(|s| s.iter().map(|v| v * factor).collect())
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        // Serialising plain structs of numbers and strings cannot fail.
        serde_json::to_writer(&mut out, &self.header).expect("header serialises");
        out.push(b'\n');
        for (layer, scores) in self.layers.iter().enumerate() {
            serde_json::to_writer(
                &mut out,
                &LayerRecord {
                    layer,
                    scores: scores.clone(),
                },
            )
            .expect("record serialises");
            out.push(b'\n');
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let text = std::str::from_utf8(bytes)
            .map_err(|e| Error::Format(format!("trace is not UTF-8: {e}")))?;
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines
            .next()
            .ok_or_else(|| Error::Format("empty trace".into()))?;
        let header: TraceHeader = serde_json::from_str(first)
            .map_err(|e| Error::Format(format!("bad trace header: {e}")))?;
        ensure!(
            header.format == TRACE_FORMAT,
            Format,
            "unknown trace format '{}'",
            header.format
        );
        ensure!(
            header.version == TRACE_VERSION,
            Format,
            "unsupported trace version {} (expected {TRACE_VERSION})",
            header.version
        );
        let mut layers = Vec::with_capacity(header.num_layers);
        for (lineno, line) in lines {
            let rec: LayerRecord = serde_json::from_str(line)
                .map_err(|e| Error::Format(format!("bad record on line {}: {e}", lineno + 1)))?;
            ensure!(
                rec.layer == layers.len(),
                Format,
                "expected layer {} on line {}, found {}",
                layers.len(),
                lineno + 1,
                rec.layer
            );
            layers.push(rec.scores);
        }
        ensure!(
            layers.len() == header.num_layers,
            Format,
            "truncated trace: {} of {} layers",
            layers.len(),
            header.num_layers
        );
        let trace = Self { header, layers };
        trace.validate()?;
        Ok(trace)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Argument(format!("'{}' is not a file path", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Generates a synthetic three-phase trace.
pub fn gen_trace(spec: &SyntheticTraceSpec) -> Result<ScoreTrace> {
    spec.validate()?;
    let t = spec.seq_len - spec.window_size;
    let mut rng = SeededStream::new(spec.seed);

    // Partial Fisher-Yates: the first `focus_size` slots become the focus set,
    // with strictly decreasing boosts in draw order.
    let mut idx: Vec<usize> = (0..t).collect();
    let mut profile = vec![0.0; t];
    for i in 0..spec.focus_size {
        let j = i + rng.below(t - i);
        idx.swap(i, j);
        profile[idx[i]] = (spec.focus_size - i) as f64 / spec.focus_size as f64;
    }

    let layers = (0..spec.num_layers)
        .map(|l| {
            let boost = spec.sharpness * spec.localization(l);
            let noise = spec.noise_at(l);
            profile
                .iter()
                .map(|&f| 1.0 + boost * f + noise * rng.symmetric(1.0))
                .collect()
        })
        .collect();
    ScoreTrace::new(
        spec.num_layers,
        spec.seq_len,
        spec.window_size,
        TraceSource::Synthetic { spec: *spec },
        layers,
    )
}

/// Runs a full-attention prefill and records every layer's reduced pooled
/// scores. Layers up to any one-shot selection see exactly these scores.
pub fn capture(
    model: &Model,
    tokens: &TokenSequence,
    window_size: usize,
    kernel_size: usize,
) -> Result<ScoreTrace> {
    let n = tokens.len();
    ensure!(
        n > window_size,
        Argument,
        "capture needs more than {window_size} tokens"
    );
    let mut layers = Vec::with_capacity(model.config().num_layers);
    let mut hook = |acts: &LayerActivations, _: &[usize]| {
        layers.push(pooled_scores(acts, window_size, kernel_size)?.reduced);
        Ok(LayerDirective::keep_all())
    };
    model.prefill(tokens, &mut hook)?;
    ScoreTrace::new(
        model.config().num_layers,
        n,
        window_size,
        TraceSource::Model {
            model: model.config().clone(),
            kernel_size,
        },
        layers,
    )
}
