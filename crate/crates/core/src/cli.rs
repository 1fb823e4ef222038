//! Command-line front end shared by the `aslkv` binary and the tests.
//!
//! Every subcommand returns the bytes it would print; `--out` redirects them
//! to a file written atomically. `ASLKV_SEED`, when set, overrides `--seed`.

use std::ffi::OsString;
use std::io::Write as _;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::cost::{cost_report, CostModelSpec};
use crate::error::{Error, Result};
use crate::harness::{replay, selection_histogram, tau_sweep};
use crate::model::{Model, ModelConfig, TokenSequence};
use crate::policy::{self, Policy, PreSelectionBudget, PruneConfig};
use crate::report::{canonical_json, emit_report, ExperimentReport, ReportFormat};
use crate::scoring::ScoringConfig;
use crate::selector::AslConfig;
use crate::trace::{capture, gen_trace, write_atomic, ScoreTrace, SyntheticTraceSpec};

pub const SEED_ENV: &str = "ASLKV_SEED";

#[derive(Debug, Parser)]
#[command(
    name = "aslkv",
    version,
    about = "Adaptive KV-cache token selection on a toy transformer"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one pruning policy end to end on the toy model.
    Run(RunArgs),
    /// Replay a score trace through the adaptive selector.
    Replay(ReplayArgs),
    /// Write a synthetic three-phase score trace.
    GenTrace(GenTraceArgs),
    /// Evaluate the closed-form cost model.
    Costmodel(CostArgs),
    /// Sweep tau over a trace, or histogram selection layers over seeds.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long, visible_alias = "L", default_value_t = 16)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub q_heads: usize,
    #[arg(long, default_value_t = 2)]
    pub kv_heads: usize,
    #[arg(long, default_value_t = 16)]
    pub head_dim: usize,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 256)]
    pub vocab: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct OutputArgs {
    /// Write here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// json or csv.
    #[arg(long, default_value = "json", value_parser = parse_format)]
    pub format: ReportFormat,
}

/// Selector overrides; unset values follow `AslConfig::for_model`.
#[derive(Debug, Args)]
pub struct AslArgs {
    /// Relative-variance threshold; 0.3 when unset.
    #[arg(long)]
    pub tau: Option<f64>,
    /// First monitored layer; a third of the depth when unset.
    #[arg(long)]
    pub lmin: Option<usize>,
    /// Rank-history depth; 8, capped at lmin + 1, when unset.
    #[arg(long)]
    pub lobs: Option<usize>,
}

impl AslArgs {
    fn is_set(&self) -> Option<&'static str> {
        if self.tau.is_some() {
            Some("tau")
        } else if self.lmin.is_some() {
            Some("lmin")
        } else if self.lobs.is_some() {
            Some("lobs")
        } else {
            None
        }
    }

    fn resolve(&self, num_layers: usize, kv_budget: usize, window_size: usize) -> AslConfig {
        let mut asl = AslConfig::for_model(num_layers, kv_budget, window_size);
        if let Some(l) = self.lmin {
            asl.min_layer = l;
        }
        asl.lookback = self.lobs.unwrap_or(asl.lookback.min(asl.min_layer + 1));
        if let Some(t) = self.tau {
            asl.tau = t;
        }
        asl
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// full, snapkv, fastkv, gemfilter, asl or asl_2pass.
    #[arg(long, value_parser = parse_policy)]
    pub policy: Policy,
    /// Prompt length.
    #[arg(long, default_value_t = 256)]
    pub n: usize,
    /// KV budget per layer; twice the window when unset.
    #[arg(long)]
    pub budget: Option<usize>,
    /// Observation window; 32 when unset.
    #[arg(long)]
    pub window: Option<usize>,
    /// Odd pooling kernel; 7 when unset.
    #[arg(long)]
    pub kernel: Option<usize>,
    /// Fixed selection layer for fastkv and gemfilter.
    #[arg(long)]
    pub sel: Option<usize>,
    #[command(flatten)]
    pub asl: AslArgs,
    /// Cache size before the adaptive selection layer: budget or full.
    #[arg(long, value_parser = parse_pre_selection)]
    pub pre_selection: Option<PreSelectionBudget>,
    /// Also write the full-attention score trace of this prompt.
    #[arg(long)]
    pub export_trace: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub trace: PathBuf,
    /// KV budget; twice the trace window when unset.
    #[arg(long)]
    pub budget: Option<usize>,
    #[command(flatten)]
    pub asl: AslArgs,
    #[arg(long, default_value = "budget", value_parser = parse_pre_selection)]
    pub pre_selection: PreSelectionBudget,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct GenTraceArgs {
    #[arg(long, visible_alias = "L", default_value_t = 32)]
    pub layers: usize,
    #[arg(long, default_value_t = 512)]
    pub n: usize,
    #[arg(long, default_value_t = 32)]
    pub window: usize,
    #[arg(long, default_value_t = 12)]
    pub uniform_until: usize,
    #[arg(long, default_value_t = 18)]
    pub localize_from: usize,
    #[arg(long)]
    pub focus: Option<usize>,
    #[arg(long)]
    pub sharpness: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub noise_decay: Option<f64>,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

impl GenTraceArgs {
    fn spec(&self, seed: u64) -> SyntheticTraceSpec {
        let base = SyntheticTraceSpec::canonical();
        SyntheticTraceSpec {
            num_layers: self.layers,
            seq_len: self.n,
            window_size: self.window,
            uniform_until: self.uniform_until,
            localize_from: self.localize_from,
            focus_size: self.focus.unwrap_or(base.focus_size),
            sharpness: self.sharpness.unwrap_or(base.sharpness),
            noise: self.noise.unwrap_or(base.noise),
            noise_decay: self.noise_decay.unwrap_or(base.noise_decay),
            seed,
        }
    }
}

#[derive(Debug, Args)]
pub struct CostArgs {
    #[arg(long = "L")]
    pub layers: usize,
    /// Selection layer, fractional for averages.
    #[arg(long)]
    pub sel: f64,
    #[arg(long)]
    pub k: usize,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub d: usize,
    /// KV heads.
    #[arg(long, default_value_t = 8)]
    pub h: usize,
    /// Pooling width.
    #[arg(long, default_value_t = 7)]
    pub w: usize,
    #[arg(long, default_value_t = 8)]
    pub lobs: usize,
    /// First monitored layer; `⌊L/3⌋` capped at the selection layer when unset.
    #[arg(long)]
    pub lmin: Option<usize>,
    /// Top-k union size; `k · lobs` when unset.
    #[arg(long)]
    pub union: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Trace to sweep; the canonical synthetic fixture when unset.
    #[arg(long, conflicts_with = "histogram")]
    pub trace: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.2, 0.3, 0.4, 0.5, 0.6], conflicts_with = "histogram")]
    pub taus: Vec<f64>,
    /// Histogram the selection layer over this many seeded fixtures.
    #[arg(long)]
    pub histogram: Option<u64>,
    #[command(flatten)]
    pub asl: AslArgs,
    #[arg(long)]
    pub budget: Option<usize>,
    /// Seed of the synthetic fixture, or the first seed of a histogram.
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_policy(s: &str) -> std::result::Result<Policy, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_pre_selection(s: &str) -> std::result::Result<PreSelectionBudget, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_format(s: &str) -> std::result::Result<ReportFormat, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Parses arguments (program name first); clap failures become usage errors.
pub fn parse<I, T>(args: I) -> Result<Cli>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    Cli::try_parse_from(args).map_err(|e| Error::Usage(e.to_string()))
}

fn resolve_seed(flag: u64, env: Option<&str>) -> Result<u64> {
    match env {
        Some(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Usage(format!("{SEED_ENV}='{v}' is not an unsigned integer"))),
        None => Ok(flag),
    }
}

fn conflict(flag: &str, policy: Policy) -> Error {
    Error::Usage(format!("--{flag} does not apply to policy {policy}"))
}

/// Builds and validates the prune config, rejecting flags the policy ignores.
pub fn prune_config(args: &RunArgs) -> Result<PruneConfig> {
    let p = args.policy;
    if p == Policy::Full {
        for (set, flag) in [
            (args.budget.is_some(), "budget"),
            (args.window.is_some(), "window"),
            (args.kernel.is_some(), "kernel"),
        ] {
            if set {
                return Err(conflict(flag, p));
            }
        }
    }
    if !p.uses_fixed_layer() && args.sel.is_some() {
        return Err(conflict("sel", p));
    }
    if !p.is_adaptive() {
        if let Some(flag) = args.asl.is_set() {
            return Err(conflict(flag, p));
        }
    }
    if matches!(p, Policy::Full | Policy::Snapkv) && args.pre_selection.is_some() {
        return Err(conflict("pre-selection", p));
    }
    let window = args.window.unwrap_or(ScoringConfig::DEFAULT_WINDOW);
    let budget = args.budget.unwrap_or(2 * window);
    let kernel = args.kernel.unwrap_or(ScoringConfig::DEFAULT_KERNEL);
    let layers = args.model.layers;
    let cfg = match p {
        Policy::Full => PruneConfig::full(),
        Policy::Snapkv => PruneConfig::snapkv(budget, window, kernel),
        Policy::Fastkv | Policy::Gemfilter => {
            let sel = args
                .sel
                .ok_or_else(|| Error::Usage(format!("policy {p} needs --sel")))?;
            PruneConfig::fixed(p, budget, window, kernel, sel)
        }
        Policy::Asl | Policy::Asl2pass => {
            PruneConfig::adaptive(p, args.asl.resolve(layers, budget, window), kernel)
        }
    };
    let cfg = match args.pre_selection {
        Some(pre) => cfg.with_pre_selection(pre),
        None => cfg,
    };
    cfg.validate(layers)?;
    Ok(cfg)
}

fn deliver(bytes: Vec<u8>, out: Option<&PathBuf>) -> Result<Vec<u8>> {
    match out {
        Some(path) => {
            write_atomic(path, &bytes)?;
            Ok(Vec::new())
        }
        None => Ok(bytes),
    }
}

fn csv_bytes<R: Serialize>(rows: &[R]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

#[derive(Serialize)]
struct SweepRow {
    tau: f64,
    selection_layer: usize,
    fallback: bool,
}

#[derive(Serialize)]
struct HistogramRow {
    selection_layer: usize,
    count: usize,
}

/// Runs a parsed command; `env_seed` is the value of `ASLKV_SEED`, if any.
/// Returns what belongs on stdout.
pub fn execute(cli: Cli, env_seed: Option<&str>) -> Result<Vec<u8>> {
    match cli.command {
        Command::Run(a) => {
            let cfg = prune_config(&a)?;
            let seed = resolve_seed(a.model.seed, env_seed)?;
            let m = &a.model;
            let model = Model::build(ModelConfig {
                num_layers: m.layers,
                num_q_heads: m.q_heads,
                num_kv_heads: m.kv_heads,
                head_dim: m.head_dim,
                hidden_dim: m.hidden,
                vocab_size: m.vocab,
                rng_seed: seed,
            })?;
            let tokens = TokenSequence::random(a.n, m.vocab, seed.wrapping_add(1))?;
            let out = policy::run(&model, &tokens, &cfg)?;
            let report = ExperimentReport::from_run(model.config(), a.n, &cfg, &out.metrics)?;
            if let Some(path) = &a.export_trace {
                let (w, s) = if cfg.policy == Policy::Full {
                    (ScoringConfig::DEFAULT_WINDOW, ScoringConfig::DEFAULT_KERNEL)
                } else {
                    (cfg.window_size, cfg.kernel_size)
                };
                capture(&model, &tokens, w, s)?.write(path)?;
            }
            deliver(
                emit_report(&report, a.output.format)?,
                a.output.out.as_ref(),
            )
        }
        Command::Replay(a) => {
            let trace = ScoreTrace::read(&a.trace)?;
            let w = trace.window_size();
            let asl = a
                .asl
                .resolve(trace.num_layers(), a.budget.unwrap_or(2 * w), w);
            let report = replay(&trace, &asl, a.pre_selection)?;
            deliver(
                emit_report(&report, a.output.format)?,
                a.output.out.as_ref(),
            )
        }
        Command::GenTrace(a) => {
            let seed = resolve_seed(a.seed, env_seed)?;
            gen_trace(&a.spec(seed))?.write(&a.out)?;
            Ok(Vec::new())
        }
        Command::Costmodel(a) => {
            let lmin = a
                .lmin
                .unwrap_or((a.layers / 3).min(a.sel.max(0.0) as usize));
            let spec = CostModelSpec {
                num_layers: a.layers,
                selection_layer: a.sel,
                min_layer: lmin,
                lookback: a.lobs,
                kv_heads: a.h,
                head_dim: a.d,
                context_len: a.n,
                kv_budget: a.k,
                pool_width: a.w,
                union_size: a.union.unwrap_or(CostModelSpec::union_bound(a.k, a.lobs)),
            };
            deliver(canonical_json(&cost_report(&spec)?)?, a.out.as_ref())
        }
        Command::Sweep(a) => {
            let seed = resolve_seed(a.seed, env_seed)?;
            let base = SyntheticTraceSpec {
                seed,
                ..SyntheticTraceSpec::canonical()
            };
            let bytes = if let Some(count) = a.histogram {
                let w = base.window_size;
                let asl = a.asl.resolve(base.num_layers, a.budget.unwrap_or(2 * w), w);
                let rows: Vec<HistogramRow> = selection_histogram(&base, &asl, count)?
                    .into_iter()
                    .map(|(selection_layer, count)| HistogramRow {
                        selection_layer,
                        count,
                    })
                    .collect();
                csv_bytes(&rows)?
            } else {
                if a.asl.tau.is_some() {
                    return Err(Error::Usage(
                        "use --taus for a sweep, --tau with --histogram".into(),
                    ));
                }
                let trace = match &a.trace {
                    Some(path) => ScoreTrace::read(path)?,
                    None => gen_trace(&base)?,
                };
                let w = trace.window_size();
                let asl = a
                    .asl
                    .resolve(trace.num_layers(), a.budget.unwrap_or(2 * w), w);
                let rows: Vec<SweepRow> = tau_sweep(&trace, &asl, &a.taus)?
                    .into_iter()
                    .map(|(tau, d)| SweepRow {
                        tau,
                        selection_layer: d.selection_layer,
                        fallback: d.fallback,
                    })
                    .collect();
                csv_bytes(&rows)?
            };
            deliver(bytes, a.out.as_ref())
        }
    }
}

/// Process entry point: parses, executes, prints, and maps the outcome to an
/// exit code (0 success, 2 usage, 1 anything else).
pub fn run_experiment<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let env_seed = std::env::var(SEED_ENV).ok();
    match execute(cli, env_seed.as_deref()) {
        Ok(bytes) => match std::io::stdout().write_all(&bytes) {
            Ok(()) => 0,
            Err(e) => {
                eprintln!("aslkv: {e}");
                1
            }
        },
        Err(e) => {
            eprintln!("aslkv: {e}");
            if matches!(e, Error::Usage(_)) {
                2
            } else {
                1
            }
        }
    }
}
