//! Layer-wise KV-cache token pruning on a deterministic toy transformer.
//!
//! The adaptive selector watches how the ranks of pooled attention scores
//! move across layers and picks the layer at which to prune the prompt down
//! to the KV budget. Fixed-layer baselines, an analytic cost model, and a
//! trace-replay harness sit alongside it.
//!
//! ```no_run
//! use aslkv::{model::{Model, ModelConfig, TokenSequence}, policy, selector::AslConfig};
//!
//! let model = Model::build(ModelConfig::small(16, 7)).unwrap();
//! let tokens = TokenSequence::random(256, model.config().vocab_size, 1).unwrap();
//! let asl = AslConfig { min_layer: 5, lookback: 4, tau: 0.3, kv_budget: 32, window_size: 8 };
//! let cfg = policy::PruneConfig::adaptive(policy::Policy::Asl, asl, 7);
//! let out = policy::run(&model, &tokens, &cfg).unwrap();
//! assert!(out.metrics.cache_sizes.iter().all(|&s| s == 32));
//! ```

pub mod cli;
pub mod cost;
pub mod error;
pub mod harness;
pub mod model;
pub mod policy;
pub mod report;
mod rng;
pub mod scoring;
pub mod selector;
pub mod tensor;
pub mod trace;

pub use error::{Error, Result};
