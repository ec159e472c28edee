use std::sync::atomic::{AtomicUsize, Ordering};

use evolvex_core::graphgen::{generate, split_dataset, GeneratorConfig, TemporalDataset};
use evolvex_core::metrics::score_forecasts;
use evolvex_core::predict::MAX_HORIZON;
use evolvex_core::promptgen::{
    build_prompt, evaluate_llm_path, parse_response, stage_prediction, CompletionProvider, PromptBundle,
    ProviderError, StubProvider,
};

fn twelve_users() -> TemporalDataset {
    let config = GeneratorConfig { users: 12, steps: 8, growth_rate: 0.1, ..GeneratorConfig::default() };
    generate(&config, 12).unwrap()
}

#[test]
fn stub_round_trip_has_no_failures_for_any_user_or_stage() {
    let ds = twelve_users();
    for u in 0..ds.user_count() {
        for stage in 1..=MAX_HORIZON {
            let bundle = build_prompt(u, &ds, stage).unwrap();
            let text = StubProvider.complete(&bundle).unwrap();
            assert!(parse_response(&text, ds.user_count()).is_ok(), "user {u} stage {stage}");
        }
    }
}

#[test]
fn stub_evaluation_fills_every_metric() {
    let report = evaluate_llm_path(&twelve_users(), &StubProvider, 4, 0).unwrap();
    assert_eq!(report.parse_failures, 0);
    assert_eq!(report.stages.len(), 4);
    for v in [report.perplexity, report.precision_at_10, report.hits_at_10, report.auc_roc, report.macro_f1, report.accuracy] {
        assert!(v.is_some_and(f64::is_finite), "{report:?}");
    }
}

/// Stub answers except for one `(user, stage)`, which gets prose.
struct Garbling {
    user: usize,
    stage: usize,
}

impl CompletionProvider for Garbling {
    fn complete(&self, bundle: &PromptBundle) -> Result<String, ProviderError> {
        if bundle.user == self.user && bundle.stage == self.stage {
            Ok("I am not able to help with that.".into())
        } else {
            StubProvider.complete(bundle)
        }
    }
}

#[test]
fn one_garbled_answer_counts_once_and_scores_empty() {
    let ds = twelve_users();
    let report = evaluate_llm_path(&ds, &Garbling { user: 5, stage: 1 }, 1, 0).unwrap();
    assert_eq!(report.parse_failures, 1);
    let report = evaluate_llm_path(&ds, &Garbling { user: 5, stage: 3 }, 4, 0).unwrap();
    assert_eq!(report.parse_failures, 1);
    assert!(report.auc_roc.is_some());
}

struct Unreachable;

impl CompletionProvider for Unreachable {
    fn complete(&self, _: &PromptBundle) -> Result<String, ProviderError> {
        Err(ProviderError::Transport("connection refused".into()))
    }
}

#[test]
fn provider_failures_do_not_abort_the_sweep() {
    let ds = twelve_users();
    let report = evaluate_llm_path(&ds, &Unreachable, 2, 0).unwrap();
    assert_eq!(report.parse_failures, 2 * ds.user_count());
}

#[test]
fn parsed_and_injected_forecasts_score_identically() {
    let ds = twelve_users();
    let horizon = 4;
    let (cond, target) = split_dataset(&ds, horizon).unwrap();
    let n = ds.user_count();
    let predictions: Vec<_> = (1..=horizon)
        .map(|stage| {
            let forecasts: Vec<_> = (0..n)
                .map(|u| {
                    let text = StubProvider.complete(&build_prompt(u, &cond, stage).unwrap()).unwrap();
                    Some(parse_response(&text, n).unwrap())
                })
                .collect();
            stage_prediction(stage, n, ds.directed, &forecasts)
        })
        .collect();
    let direct = score_forecasts(&predictions, &cond, &target, 9).unwrap();
    let piped = evaluate_llm_path(&ds, &StubProvider, horizon, 9).unwrap();
    assert_eq!(direct, piped);
}

/// Stub answers with a configurable worker count, recording the peak in flight.
struct Counting {
    workers: usize,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
}

impl CompletionProvider for Counting {
    fn complete(&self, bundle: &PromptBundle) -> Result<String, ProviderError> {
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        std::thread::sleep(std::time::Duration::from_millis(2));
        let out = StubProvider.complete(bundle);
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        out
    }

    fn concurrency(&self) -> usize {
        self.workers
    }
}

#[test]
fn concurrency_is_bounded_and_does_not_change_results() {
    let ds = twelve_users();
    let serial = evaluate_llm_path(&ds, &StubProvider, 4, 1).unwrap();
    let pool = Counting { workers: 4, in_flight: AtomicUsize::new(0), peak: AtomicUsize::new(0) };
    let parallel = evaluate_llm_path(&ds, &pool, 4, 1).unwrap();
    assert_eq!(serial, parallel);
    assert!(pool.peak.load(Ordering::SeqCst) <= 4);
}

#[test]
fn prompts_only_name_users_by_opaque_id() {
    let ds = twelve_users();
    let text = build_prompt(0, &ds, 1).unwrap().render();
    for line in text.lines().filter(|l| l.contains("user ")) {
        for word in line.split("user ").skip(1) {
            let id: String = word.chars().take_while(char::is_ascii_digit).collect();
            assert!(!id.is_empty(), "{line}");
        }
    }
}
