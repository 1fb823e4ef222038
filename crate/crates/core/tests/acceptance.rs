//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Runs without the libtest harness so the lines always print.

mod common;

use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use aslkv::cost::{cost_report, memory_ratio, tpot_ratio, ttft_ratio, CostModelSpec};
use aslkv::harness::{canonical_asl, replay, replay_decision, tau_sweep};
use aslkv::model::{Model, ModelConfig, TokenSequence};
use aslkv::policy::{self, Policy, PreSelectionBudget, PruneConfig};
use aslkv::report::{emit_report, ExperimentReport, ReportFormat};
use aslkv::scoring::rank_desc;
use aslkv::selector::{top_union, AslConfig};
use aslkv::trace::{capture, gen_trace, ScoreTrace, SyntheticTraceSpec};
use common::{
    below, capture_qk, chacha, oracle_replay, oracle_scores, oracle_union, permutation,
    CANONICAL_SELECTION_LAYER,
};

fn llama(num_layers: usize, sel: f64) -> CostModelSpec {
    CostModelSpec {
        num_layers,
        selection_layer: sel,
        min_layer: num_layers / 3,
        lookback: 8,
        kv_heads: 8,
        head_dim: 128,
        context_len: 131_072,
        kv_budget: 2048,
        pool_width: 7,
        union_size: CostModelSpec::union_bound(2048, 8),
    }
}

fn cost_model_values() {
    let close = |got: f64, want: f64, tol: f64| {
        assert!((got - want).abs() <= tol, "got {got}, want {want}±{tol}")
    };
    close(ttft_ratio(&llama(32, 15.0)), 0.50, 0.005);
    close(ttft_ratio(&llama(32, 23.9)), 0.78, 0.005);
    close(ttft_ratio(&llama(28, 21.6)), 0.81, 0.005);
    assert_eq!(tpot_ratio(&llama(32, 15.0)), 0.015625);
    close(memory_ratio(&llama(32, 15.0)), 0.016, 0.001);
    cost_report(&llama(32, 15.0)).unwrap();
}

fn exact_budget() {
    let model = Model::build(ModelConfig::small(16, 3)).unwrap();
    let tokens = TokenSequence::random(256, 256, 4).unwrap();
    let asl = AslConfig {
        min_layer: 5,
        lookback: 4,
        tau: 0.3,
        kv_budget: 32,
        window_size: 8,
    };
    let cfg = PruneConfig::adaptive(Policy::Asl, asl, 7);
    let out = policy::run_asl(&model, &tokens, &cfg).unwrap();
    assert_eq!(out.caches.len(), 16);
    for c in &out.caches {
        for h in &c.heads {
            assert_eq!(h.len(), 32, "layer {}", c.layer_index);
        }
    }
}

/// One seeded oracle-equivalence instance with `n ≤ 64`, `L ≤ 16`.
fn oracle_instance(seed: u64) {
    let mut rng = chacha(1000 + seed);
    let layers = below(&mut rng, 3, 17);
    let window = [2, 4, 8][below(&mut rng, 0, 3)];
    let n = below(&mut rng, window + 2, 65);
    let kv_budget = below(&mut rng, window + 1, n + 1);
    let kernel = [1, 3, 5, 7][below(&mut rng, 0, 4)];
    let min_layer = below(&mut rng, 0, layers);
    let lookback = below(&mut rng, 1, min_layer + 2);
    let tau = [0.2, 0.4, 0.6, 0.8, 0.95][below(&mut rng, 0, 5)];
    let kv_heads = [1, 2][below(&mut rng, 0, 2)];
    let asl = AslConfig {
        min_layer,
        lookback,
        tau,
        kv_budget,
        window_size: window,
    };
    let model = Model::build(ModelConfig {
        num_layers: layers,
        num_q_heads: 4,
        num_kv_heads: kv_heads,
        head_dim: 8,
        hidden_dim: 32,
        vocab_size: 64,
        rng_seed: seed,
    })
    .unwrap();
    let tokens = TokenSequence::random(n, 64, seed + 7).unwrap();
    let out = policy::run_asl(
        &model,
        &tokens,
        &PruneConfig::adaptive(Policy::Asl, asl, kernel),
    )
    .unwrap();

    let qk = capture_qk(&model, &tokens);
    let oracle = oracle_replay(|l| oracle_scores(&qk[l], window, kernel), layers, &asl);
    let ctx = format!("seed {seed} (L={layers}, n={n}, W={window}, k={kv_budget}, S={kernel})");

    for (layer, want) in &oracle.ranks {
        let live = out.metrics.layer_scores[*layer]
            .as_ref()
            .unwrap_or_else(|| panic!("{ctx}: no scores at {layer}"));
        assert_eq!(
            &rank_desc(*layer, live).unwrap().ranks,
            want,
            "{ctx}: ranks at layer {layer}"
        );
    }
    assert_eq!(
        out.metrics.variance_log.len(),
        oracle.variances.len(),
        "{ctx}"
    );
    for (s, &(layer, var, rel)) in out.metrics.variance_log.iter().zip(&oracle.variances) {
        assert_eq!(s.layer, layer, "{ctx}");
        assert!(
            (s.variance - var).abs() <= 1e-12,
            "{ctx}: variance {} vs {var}",
            s.variance
        );
        assert!(
            (s.relative - rel).abs() <= 1e-12,
            "{ctx}: relative {} vs {rel}",
            s.relative
        );
    }
    assert_eq!(
        out.metrics.selection_layer,
        Some(oracle.selection_layer),
        "{ctx}"
    );
    assert_eq!(
        out.metrics.selected_positions.as_ref(),
        Some(&oracle.selected),
        "{ctx}"
    );
    assert_eq!(out.metrics.fallback, oracle.fallback, "{ctx}");
}

fn oracle_equivalence() {
    for seed in 0..50 {
        oracle_instance(seed);
    }
}

fn degeneracy() {
    for seed in 0..10u64 {
        let layers = 3 + (seed as usize % 4);
        let n = 12 + 5 * seed as usize;
        let w = 2 + seed as usize % 3;
        let model = Model::build(ModelConfig::small(layers, 40 + seed)).unwrap();
        let tokens = TokenSequence::random(n, 256, 60 + seed).unwrap();
        let full = policy::run_full(&model, &tokens).unwrap().logits;
        let asl = AslConfig {
            min_layer: 1,
            lookback: 2,
            tau: 0.5,
            kv_budget: n,
            window_size: w,
        };
        let configs = [
            PruneConfig::snapkv(n, w, 3),
            PruneConfig::fixed(Policy::Fastkv, n, w, 3, layers / 2),
            PruneConfig::fixed(Policy::Gemfilter, n, w, 3, layers / 2),
            PruneConfig::adaptive(Policy::Asl, asl, 3),
            PruneConfig::adaptive(Policy::Asl2pass, asl, 3),
        ];
        for cfg in configs {
            let got = policy::run(&model, &tokens, &cfg).unwrap().logits;
            assert_eq!(got, full, "{} seed {seed}", cfg.policy);
        }
    }
}

fn monotone_sweep() {
    let trace = gen_trace(&SyntheticTraceSpec::canonical()).unwrap();
    let asl = canonical_asl();
    let res = tau_sweep(&trace, &asl, &[0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
    let layers: Vec<usize> = res.iter().map(|(_, d)| d.selection_layer).collect();
    assert!(layers.windows(2).all(|w| w[1] <= w[0]), "{layers:?}");
    assert_eq!(layers[1], CANONICAL_SELECTION_LAYER);
    let oracle = oracle_replay(|l| trace.layer(l).to_vec(), trace.num_layers(), &asl);
    assert_eq!(oracle.selection_layer, CANONICAL_SELECTION_LAYER);
}

fn invariance_suite() {
    // Relative variance is exactly 1.0 at the first evaluated layer.
    for seed in 0..8 {
        let spec = SyntheticTraceSpec {
            seed,
            ..SyntheticTraceSpec::canonical()
        };
        let r = replay_decision(&gen_trace(&spec).unwrap(), &canonical_asl()).unwrap();
        assert_eq!(r.variance_log[0].layer, 10);
        assert_eq!(r.variance_log[0].relative, 1.0);
    }

    // Positive rescaling changes nothing downstream of the scores.
    for seed in [42, 3, 17] {
        let spec = SyntheticTraceSpec {
            seed,
            ..SyntheticTraceSpec::canonical()
        };
        let t = gen_trace(&spec).unwrap();
        let base = replay_decision(&t, &canonical_asl()).unwrap();
        for c in [1e-6, 0.25, 3.0, 1e4] {
            let scaled = t.scaled(c);
            for l in 0..t.num_layers() {
                assert_eq!(
                    rank_desc(l, t.layer(l)).unwrap().ranks,
                    rank_desc(l, scaled.layer(l)).unwrap().ranks
                );
            }
            assert_eq!(
                replay_decision(&scaled, &canonical_asl()).unwrap(),
                base,
                "scale {c}"
            );
        }
    }

    // Union size bound on random rank matrices.
    let mut rng = chacha(5);
    for _ in 0..1000 {
        let t = below(&mut rng, 1, 80);
        let lobs = below(&mut rng, 1, 9);
        let k = below(&mut rng, 1, t + 1);
        let rows: Vec<Vec<usize>> = (0..lobs).map(|_| permutation(&mut rng, t)).collect();
        let refs: Vec<&[usize]> = rows.iter().map(Vec::as_slice).collect();
        let u = top_union(&refs, k).unwrap();
        assert!(u.len() <= k * lobs);
        assert!(u.len() >= k);
        assert_eq!(u, oracle_union(&rows, k).into_iter().collect::<Vec<_>>());
    }

    // The observation window survives in every layer of every bounded policy.
    for seed in 0..3u64 {
        let (layers, n, k, w) = (6, 40 + 8 * seed as usize, 12, 4 + seed as usize);
        let model = Model::build(ModelConfig::small(layers, 90 + seed)).unwrap();
        let tokens = TokenSequence::random(n, 256, seed).unwrap();
        let asl = AslConfig {
            min_layer: 2,
            lookback: 2,
            tau: 0.5,
            kv_budget: k,
            window_size: w,
        };
        for cfg in [
            PruneConfig::snapkv(k, w, 3),
            PruneConfig::fixed(Policy::Fastkv, k, w, 3, 3),
            PruneConfig::fixed(Policy::Gemfilter, k, w, 3, 3),
            PruneConfig::adaptive(Policy::Asl, asl, 3),
            PruneConfig::adaptive(Policy::Asl2pass, asl, 3),
        ] {
            let out = policy::run(&model, &tokens, &cfg).unwrap();
            for c in &out.caches {
                for h in &c.heads {
                    assert!(
                        (n - w..n).all(|p| h.positions.contains(&p)),
                        "{} layer {}",
                        cfg.policy,
                        c.layer_index
                    );
                }
            }
        }
    }
}

fn replay_fidelity() {
    let dir = tempfile::tempdir().unwrap();
    for (seed, pre) in [
        (1u64, PreSelectionBudget::Budget),
        (2, PreSelectionBudget::Full),
        (3, PreSelectionBudget::Budget),
    ] {
        let model = Model::build(ModelConfig::small(12, seed)).unwrap();
        let tokens = TokenSequence::random(96, 256, seed + 50).unwrap();
        let asl = AslConfig {
            min_layer: 4,
            lookback: 4,
            tau: 0.6,
            kv_budget: 24,
            window_size: 8,
        };
        let cfg = PruneConfig::adaptive(Policy::Asl, asl, 5).with_pre_selection(pre);
        let out = policy::run_asl(&model, &tokens, &cfg).unwrap();
        let live = ExperimentReport::from_run(model.config(), 96, &cfg, &out.metrics).unwrap();

        let path = dir.path().join(format!("trace-{seed}.jsonl"));
        capture(&model, &tokens, 8, 5)
            .unwrap()
            .write(&path)
            .unwrap();
        let replayed = replay(&ScoreTrace::read(&path).unwrap(), &asl, pre).unwrap();
        for format in [ReportFormat::Json, ReportFormat::Csv] {
            assert_eq!(
                emit_report(&replayed, format).unwrap(),
                emit_report(&live, format).unwrap(),
                "seed {seed} {format:?}"
            );
        }
    }
}

fn main() {
    let criteria: [(&str, Duration, fn()); 7] = [
        (
            "cost model matches closed-form predictions",
            Duration::from_secs(1),
            cost_model_values,
        ),
        (
            "exact budget at every layer",
            Duration::from_secs(10),
            exact_budget,
        ),
        (
            "streaming pipeline equals brute-force oracle",
            Duration::from_secs(60),
            oracle_equivalence,
        ),
        ("k = n reproduces full-KV logits", Duration::MAX, degeneracy),
        (
            "threshold sweep is monotone and frozen value holds",
            Duration::MAX,
            monotone_sweep,
        ),
        ("invariance suite", Duration::MAX, invariance_suite),
        (
            "replay reproduces the live report byte for byte",
            Duration::MAX,
            replay_fidelity,
        ),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, limit, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check));
        let elapsed = start.elapsed();
        let verdict = match outcome {
            Ok(()) if elapsed <= *limit => "PASS".to_string(),
            Ok(()) => format!("FAIL (took {elapsed:.2?}, limit {limit:.0?})"),
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                format!("FAIL ({msg})")
            }
        };
        if !verdict.starts_with("PASS") {
            failed += 1;
        }
        println!("acceptance {}: {name} ... {verdict} [{elapsed:.2?}]", i + 1);
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
