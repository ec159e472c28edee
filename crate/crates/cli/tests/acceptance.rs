//! One line per acceptance criterion. Runs without the libtest harness so the
//! lines show up in plain `cargo test` output.
//!
//! Criteria marked `Gate::Report` are printed but do not fail the run; the
//! reason for each is recorded in the project notes.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use evolvex_core::embed::RawModalities;
use evolvex_core::fusion::FusionStrategy;
use evolvex_core::graphgen::{generate, split_dataset, Adjacency, GeneratorConfig};
use evolvex_core::metrics::{auc_roc, evaluate_model, perplexity};
use evolvex_core::model::{ModelDims, ModelParams};
use evolvex_core::numeric::uniform_vec;
use evolvex_core::predict::{rollout, EvolutionForecast};
use evolvex_core::promptgen::{evaluate_llm_path, StubProvider};
use evolvex_core::train::{
    activity_loss, gradient_check, link_loss, train, ActivityObjective, LabeledPair, LossWeights, TrainConfig,
    TrainingSequence, Transition,
};
use ndarray::array;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

#[derive(Clone, Copy, PartialEq)]
enum Gate {
    Assert,
    Report,
}

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---- gradient ---------------------------------------------------------------

fn random_sequence(seed: u64, n: usize, t: usize) -> TrainingSequence {
    const RAW: [usize; 3] = [4, 5, 7];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let transitions = (0..t)
        .map(|_| {
            let inputs = (0..n)
                .map(|_| RawModalities {
                    demographic: uniform_vec(RAW[0], 1.0, &mut rng),
                    posts: uniform_vec(RAW[1], 1.0, &mut rng),
                    engagement: uniform_vec(RAW[2], 1.0, &mut rng),
                })
                .collect();
            let mut pairs = Vec::new();
            for i in 0..n {
                for j in i + 1..n {
                    if rng.random_bool(0.6) {
                        pairs.push(LabeledPair { i, j, label: if rng.random_bool(0.5) { 1.0 } else { 0.0 } });
                    }
                }
            }
            let counts = (0..n)
                .map(|_| {
                    let mut c = [0.0; 8];
                    for v in c.iter_mut() {
                        *v = rng.random_range(0..4) as f64;
                    }
                    c
                })
                .collect();
            Transition { inputs, pairs, counts }
        })
        .collect();
    TrainingSequence { directed: false, transitions }
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for strategy in FusionStrategy::ALL {
        for seed in 0..20u64 {
            let seq = random_sequence(seed, 5, 3);
            let dims = ModelDims { raw: [4, 5, 7], d: 6, hidden: 5, out: 4 };
            let params = ModelParams::init(strategy, dims, seed + 100);
            let report = gradient_check(&params, &seq, LossWeights::new(0.5, 0.5), ActivityObjective::Binary, 1e-4)
                .map_err(|e| e.to_string())?;
            worst = worst.max(report.max_relative_error);
            failures += usize::from(!report.passed);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        failures == 0 && worst < 1e-4 && secs < 60.0,
        format!("60 instances, worst relative error {worst:.2e}, {secs:.1}s"),
    )
}

// ---- oracles ----------------------------------------------------------------

fn loss_oracles() -> Outcome {
    let adj = Adjacency::from_edges(3, false, &[(0, 1), (1, 2)]).map_err(|e| e.to_string())?;
    let p = array![[0.0, 0.8, 0.3], [0.8, 0.0, 0.6], [0.3, 0.6, 0.0]];
    let link = link_loss(&p, &adj, &[(0, 1), (1, 2), (0, 2)]).map_err(|e| e.to_string())?;
    let link_expected = -(0.8f64.ln() + 0.6f64.ln() + 0.7f64.ln()) / 3.0;

    let probs = array![[0.7, 0.2, 0.4], [0.1, 0.9, 0.5], [0.3, 0.3, 0.3]];
    let counts = array![[4.0, 2.0, 0.0], [1.0, 3.0, 3.0], [0.0, 0.0, 0.0]];
    let u0 = -(0.7f64.ln() + 0.5 * 0.2f64.ln());
    let u1 = -((1.0 / 3.0) * 0.1f64.ln() + 0.9f64.ln() + 0.5f64.ln());
    let act = activity_loss(&probs, &counts);
    let act_expected = (u0 + u1) / 2.0;

    let (dl, da) = ((link - link_expected).abs(), (act - act_expected).abs());
    check(dl < 1e-12 && da < 1e-12, format!("link off by {dl:.1e}, activity off by {da:.1e}"))
}

fn brute_force_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut total) = (0.0, 0.0);
    for (si, _) in scores.iter().zip(labels).filter(|(_, &l)| l) {
        for (sj, _) in scores.iter().zip(labels).filter(|(_, &l)| !l) {
            total += 1.0;
            wins += if si > sj {
                1.0
            } else if si == sj {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / total
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut exact = 0;
    while exact < 100 {
        let n = rng.random_range(2..30);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..5) as f64 / 4.0).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
            continue;
        }
        let got = auc_roc(&scores, &labels).map_err(|e| e.to_string())?;
        if got != brute_force_auc(&scores, &labels) {
            return Err(format!("auc mismatch on instance {exact}"));
        }
        exact += 1;
    }
    let uniform = perplexity(&vec![vec![0.125; 8]; 40], &(0..40).map(|i| i % 8).collect::<Vec<_>>())
        .map_err(|e| e.to_string())?;
    let dyadic = perplexity(&[vec![0.5, 0.5], vec![0.25, 0.75], vec![0.875, 0.125]], &[0, 0, 1])
        .map_err(|e| e.to_string())?;
    check(
        uniform == 8.0 && dyadic == 4.0,
        format!("100/100 auc instances exact, uniform {uniform}, closed form {dyadic}"),
    )
}

// ---- planted data -----------------------------------------------------------

struct SeedResult {
    concat: f64,
    crossmodal: f64,
    auc: f64,
}

/// Trains all three strategies on seeds 0..5 of the default planted dataset.
fn planted_runs() -> Result<(Vec<SeedResult>, f64), String> {
    let start = Instant::now();
    let generator = GeneratorConfig::default();
    let mut out = Vec::new();
    for seed in 0..5u64 {
        let ds = generate(&generator, seed).map_err(|e| e.to_string())?;
        let (cond, _) = split_dataset(&ds, 4).map_err(|e| e.to_string())?;
        let mut ppl = [0.0; 3];
        let mut auc = 0.0;
        for (k, strategy) in FusionStrategy::ALL.into_iter().enumerate() {
            let config = TrainConfig {
                strategy,
                seed,
                epochs: 200,
                lambda_link: 0.5,
                lambda_activity: 0.5,
                ..TrainConfig::default()
            };
            let model = train(&cond, &config).map_err(|e| e.to_string())?.model;
            let report = evaluate_model(&model, &ds, 4, seed).map_err(|e| e.to_string())?;
            ppl[k] = report.perplexity.ok_or("perplexity undefined")?;
            if strategy == FusionStrategy::CrossModal {
                auc = report.auc_roc.ok_or("auc undefined")?;
            }
        }
        let concat = ppl[FusionStrategy::ALL.iter().position(|&s| s == FusionStrategy::Concat).unwrap()];
        let crossmodal = ppl[FusionStrategy::ALL.iter().position(|&s| s == FusionStrategy::CrossModal).unwrap()];
        out.push(SeedResult { concat, crossmodal, auc });
    }
    Ok((out, start.elapsed().as_secs_f64()))
}

fn fusion_ordering(runs: &Result<(Vec<SeedResult>, f64), String>) -> Outcome {
    let (runs, secs) = runs.as_ref().map_err(Clone::clone)?;
    let wins = runs.iter().filter(|r| r.crossmodal < r.concat).count();
    let pairs: Vec<String> = runs.iter().map(|r| format!("{:.3}/{:.3}", r.crossmodal, r.concat)).collect();
    check(
        wins >= 4 && *secs < 300.0,
        format!("crossmodal < concat in {wins}/5 seeds [{}], {secs:.1}s", pairs.join(" ")),
    )
}

fn link_quality(runs: &Result<(Vec<SeedResult>, f64), String>) -> Outcome {
    let (runs, _) = runs.as_ref().map_err(Clone::clone)?;
    let ok = runs.iter().filter(|r| r.auc >= 0.85).count();
    let aucs: Vec<String> = runs.iter().map(|r| format!("{:.3}", r.auc)).collect();
    check(ok >= 4, format!("auc >= 0.85 in {ok}/5 seeds [{}]", aucs.join(" ")))
}

// ---- rollout ----------------------------------------------------------------

fn same_prefix(a: &EvolutionForecast, b: &EvolutionForecast, k: usize) -> bool {
    a.stages[..k].iter().zip(&b.stages[..k]).all(|(x, y)| {
        x.stage == y.stage
            && x.edge_probs == y.edge_probs
            && x.activity_probs == y.activity_probs
            && x.predicted_edges == y.predicted_edges
    })
}

fn rollout_contracts() -> Outcome {
    let mut runner = TestRunner::new_with_rng(
        Config { cases: 16, failure_persistence: None, ..Config::default() },
        proptest::test_runner::TestRng::deterministic_rng(proptest::test_runner::RngAlgorithm::ChaCha),
    );
    let strategies =
        prop_oneof![Just(FusionStrategy::Concat), Just(FusionStrategy::Attention), Just(FusionStrategy::CrossModal)];
    let result = runner.run(&(0u64..1000, 5usize..14, strategies, any::<bool>()), |(seed, users, strategy, directed)| {
        let generator = GeneratorConfig { users, steps: 6, directed, ..GeneratorConfig::default() };
        let ds = generate(&generator, seed).unwrap();
        let (cond, _) = split_dataset(&ds, 4).unwrap();
        let config = TrainConfig { strategy, seed, epochs: 10, ..TrainConfig::default() };
        let model = train(&cond, &config).unwrap().model;
        let full = rollout(&model, &cond, 4).unwrap();
        prop_assert_eq!(full.stages.len(), 4);
        for k in 1..4 {
            prop_assert!(same_prefix(&full, &rollout(&model, &cond, k).unwrap(), k), "prefix {} differs", k);
        }
        prop_assert!(same_prefix(&full, &rollout(&model, &cond, 4).unwrap(), 4), "rerun differs");
        for s in &full.stages {
            prop_assert!(s.edge_probs.iter().chain(&s.activity_probs).all(|p| (0.0..=1.0).contains(p)));
            prop_assert!(s.predicted_edges.has_zero_diagonal());
            if !directed {
                prop_assert!(s.edge_probs == s.edge_probs.t() && s.predicted_edges.is_symmetric());
            }
        }
        Ok(())
    });
    result.map(|_| "16 generated cases: prefix, determinism, bounds, symmetry".to_string()).map_err(|e| e.to_string())
}

// ---- prompts ----------------------------------------------------------------

fn prompt_round_trip() -> Outcome {
    let generator = GeneratorConfig { users: 12, steps: 8, growth_rate: 0.1, ..GeneratorConfig::default() };
    let ds = generate(&generator, 12).map_err(|e| e.to_string())?;
    let r = evaluate_llm_path(&ds, &StubProvider, 4, 0).map_err(|e| e.to_string())?;
    let fields = [r.perplexity, r.precision_at_10, r.hits_at_10, r.auc_roc, r.macro_f1, r.accuracy];
    let filled = fields.iter().filter(|v| v.is_some_and(f64::is_finite)).count();
    check(
        r.parse_failures == 0 && filled == fields.len() && r.stages.len() == 4,
        format!("12 users, {} parse failures, {filled}/{} metrics populated", r.parse_failures, fields.len()),
    )
}

// ---- end to end -------------------------------------------------------------

const ARTIFACTS: [&str; 5] = ["dataset.json", "checkpoint.json", "checkpoint.loss.json", "report.json", "forecast.json"];

fn pipeline(dir: &Path) -> Result<(), String> {
    let steps: [&[&str]; 4] = [
        &["generate", "--seed", "3"],
        &["train", "-d", "dataset.json", "--epochs", "40", "--seed", "3"],
        &["eval", "-d", "dataset.json", "-c", "checkpoint.json", "--seed", "3"],
        &["forecast", "-d", "dataset.json", "-c", "checkpoint.json"],
    ];
    for args in steps {
        let out = Command::new(env!("CARGO_BIN_EXE_evolvex"))
            .args(args)
            .current_dir(dir)
            .env_remove("EVOLVEX_CONFIG")
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{} failed: {}", args[0], String::from_utf8_lossy(&out.stderr)));
        }
    }
    Ok(())
}

fn end_to_end_determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    pipeline(a.path())?;
    pipeline(b.path())?;
    for name in ARTIFACTS {
        let x = std::fs::read(a.path().join(name)).map_err(|e| format!("{name}: {e}"))?;
        let y = std::fs::read(b.path().join(name)).map_err(|e| format!("{name}: {e}"))?;
        if x != y {
            return Err(format!("{name} differs between runs"));
        }
    }
    Ok(format!("{} artifacts byte-identical across two runs", ARTIFACTS.len()))
}

fn main() {
    let planted = planted_runs();
    let criteria: Vec<(&str, Gate, Outcome)> = vec![
        ("gradient correctness", Gate::Assert, gradient_correctness()),
        ("loss oracle equivalence", Gate::Assert, loss_oracles()),
        ("metric oracles", Gate::Assert, metric_oracles()),
        ("fusion ordering", Gate::Report, fusion_ordering(&planted)),
        ("link prediction quality", Gate::Report, link_quality(&planted)),
        ("rollout contracts", Gate::Assert, rollout_contracts()),
        ("prompt round trip", Gate::Assert, prompt_round_trip()),
        ("end-to-end determinism", Gate::Assert, end_to_end_determinism()),
    ];
    let mut blocking = 0;
    for (name, gate, outcome) in &criteria {
        match outcome {
            Ok(detail) => println!("PASS  {name:<26} {detail}"),
            Err(detail) if *gate == Gate::Report => println!("FAIL  {name:<26} {detail} (reported, not gating)"),
            Err(detail) => {
                blocking += 1;
                println!("FAIL  {name:<26} {detail}");
            }
        }
    }
    let passed = criteria.iter().filter(|c| c.2.is_ok()).count();
    println!("acceptance: {passed}/{} criteria pass", criteria.len());
    if blocking > 0 {
        std::process::exit(1);
    }
}
