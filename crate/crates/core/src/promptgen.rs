//! Role-based forecasting prompts, completion providers and response parsing.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::embed::summarize_engagement;
use crate::graphgen::{split_dataset, GraphGenError, TemporalDataset, CATEGORY_COUNT};
use crate::metrics::{score_forecasts, EvalReport, MetricsError, StagePrediction};
use crate::predict::MAX_HORIZON;

/// Largest number of 2-hop neighbours listed in the graph section.
pub const MAX_NEIGHBORHOOD: usize = 50;
pub const DEFAULT_CONCURRENCY: usize = 4;

pub const RESPONSE_SCHEMA: &str = r#"{
  "type": "object",
  "required": ["connections", "activities", "stage"],
  "properties": {
    "connections": {
      "type": "array",
      "items": {
        "type": "object",
        "required": ["id", "confidence"],
        "properties": {
          "id": {"type": "integer", "minimum": 0},
          "confidence": {"type": "number", "minimum": 0, "maximum": 1}
        }
      }
    },
    "activities": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}, "minItems": 8, "maxItems": 8},
    "stage": {"type": "integer", "minimum": 1, "maximum": 4},
    "rationale": {"type": "string"}
  }
}"#;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSection {
    UserGraph,
    UserHistory,
    UserEngagementScores,
    UserDemography,
}

impl DataSection {
    pub const ALL: [DataSection; 4] =
        [Self::UserGraph, Self::UserHistory, Self::UserEngagementScores, Self::UserDemography];

    pub fn label(self) -> &'static str {
        match self {
            Self::UserGraph => "User Graph",
            Self::UserHistory => "User History",
            Self::UserEngagementScores => "User Engagement Scores",
            Self::UserDemography => "User Demography",
        }
    }
}

impl fmt::Display for DataSection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Structural headings, in render order.
pub const STRUCTURAL_LABELS: [&str; 5] = ["Role", "Task", "Context", "Data", "Instructions"];

#[derive(Clone, Debug, PartialEq)]
pub struct PromptBundle {
    pub user: usize,
    pub stage: usize,
    pub user_count: usize,
    pub role: String,
    pub task: String,
    pub context: String,
    pub sections: [(DataSection, String); 4],
    pub instructions: String,
    pub response_schema: String,
    /// Direct neighbours at the last observed step, ascending.
    pub neighbors: Vec<usize>,
    /// Users two hops away that were kept after truncation, ascending.
    pub second_hop: Vec<usize>,
}

impl PromptBundle {
    pub fn section(&self, which: DataSection) -> &str {
        &self.sections.iter().find(|(s, _)| *s == which).expect("all sections present").1
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("## Role\n{}\n\n", self.role));
        out.push_str(&format!("## Task\n{}\n\n", self.task));
        out.push_str(&format!("## Context\n{}\n\n", self.context));
        out.push_str("## Data\n");
        for (section, body) in &self.sections {
            out.push_str(&format!("### {section}\n{body}\n\n"));
        }
        out.push_str(&format!("## Instructions\n{}\n{}\n", self.instructions, self.response_schema));
        out
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("unknown user {0}")]
    UnknownUser(usize),
    #[error("stage {0} is outside 1..={MAX_HORIZON}")]
    BadStage(usize),
}

fn user_label(u: usize) -> String {
    format!("user {u}")
}

/// Neighbours within two hops of `user` on the last snapshot, truncated to the
/// [`MAX_NEIGHBORHOOD`] highest-degree ones (ties by id).
fn neighborhood(ds: &TemporalDataset, user: usize) -> (Vec<usize>, Vec<usize>) {
    let adj = &ds.last().adjacency;
    let near: BTreeSet<usize> = adj.neighbors(user).collect();
    let mut far: BTreeSet<usize> = BTreeSet::new();
    for &v in &near {
        far.extend(adj.neighbors(v).filter(|w| *w != user && !near.contains(w)));
    }
    let mut ring: Vec<usize> = near.iter().chain(&far).copied().collect();
    ring.sort_by(|&a, &b| adj.degree(b).cmp(&adj.degree(a)).then(a.cmp(&b)));
    ring.truncate(MAX_NEIGHBORHOOD);
    let kept: BTreeSet<usize> = ring.into_iter().collect();
    let first = near.iter().filter(|v| kept.contains(v)).copied().collect();
    let second = far.iter().filter(|v| kept.contains(v)).copied().collect();
    (first, second)
}

fn graph_section(ds: &TemporalDataset, user: usize, first: &[usize], second: &[usize]) -> String {
    let adj = &ds.last().adjacency;
    let mut members: Vec<usize> = vec![user];
    members.extend(first);
    members.extend(second);
    members.sort_unstable();
    let inner: BTreeSet<usize> = std::iter::once(user).chain(first.iter().copied()).collect();
    let arrow = if ds.directed { "->" } else { "--" };
    let mut lines = Vec::new();
    for &a in &members {
        for &b in &members {
            let listed = if ds.directed { a != b } else { a < b };
            if listed && adj.has_edge(a, b) && (inner.contains(&a) || inner.contains(&b)) {
                lines.push(format!("{} {arrow} {}", user_label(a), user_label(b)));
            }
        }
    }
    if lines.is_empty() {
        "no connections".to_string()
    } else {
        lines.join("\n")
    }
}

fn history_section(ds: &TemporalDataset, user: usize) -> String {
    let names = &ds.vocabularies.categories;
    ds.snapshots
        .iter()
        .map(|snap| {
            let counts = snap.category_counts(user);
            let parts: Vec<String> = counts
                .iter()
                .enumerate()
                .filter(|(_, &c)| c > 0.0)
                .map(|(c, &n)| format!("{} {}", names[c], n as u64))
                .collect();
            let body = if parts.is_empty() { "no posts".to_string() } else { parts.join(", ") };
            format!("step {}: {body}", snap.step)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn engagement_section(ds: &TemporalDataset, user: usize) -> String {
    ds.snapshots
        .iter()
        .map(|snap| {
            format!("step {}: {}", snap.step, summarize_engagement(&snap.engagement[user], &ds.vocabularies.categories))
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn demography_section(ds: &TemporalDataset, user: usize) -> String {
    let p = &ds.profiles[user];
    let v = &ds.vocabularies;
    format!(
        "age: {}\ngender: {}\noccupation: {}\nlocation: {}",
        p.age, v.genders[p.gender], v.occupations[p.occupation], v.locations[p.location]
    )
}

/// Assembles the prompt for `user` at forecast `stage` from the observed steps in `ds`.
pub fn build_prompt(user: usize, ds: &TemporalDataset, stage: usize) -> Result<PromptBundle, PromptError> {
    if user >= ds.user_count() {
        return Err(PromptError::UnknownUser(user));
    }
    if !(1..=MAX_HORIZON).contains(&stage) {
        return Err(PromptError::BadStage(stage));
    }
    let last = ds.last().step;
    let (first, second) = neighborhood(ds, user);
    let categories = ds.vocabularies.categories.join(", ");
    Ok(PromptBundle {
        user,
        stage,
        user_count: ds.user_count(),
        role: "You are a data scientist who studies how members of an anonymised social network change over time."
            .to_string(),
        task: format!(
            "Forecast the state of {} at step {}, which is {stage} step(s) after the last observation: \
             which users they will be connected to, and how likely they are to post in each category.",
            user_label(user),
            last + stage
        ),
        context: format!(
            "The network has {} users with ids 0 to {}. Observations cover steps {} to {last}. \
             Connections are {}. Categories, in order: {categories}.",
            ds.user_count(),
            ds.user_count() - 1,
            ds.snapshots[0].step,
            if ds.directed { "directed" } else { "mutual" }
        ),
        sections: [
            (DataSection::UserGraph, graph_section(ds, user, &first, &second)),
            (DataSection::UserHistory, history_section(ds, user)),
            (DataSection::UserEngagementScores, engagement_section(ds, user)),
            (DataSection::UserDemography, demography_section(ds, user)),
        ],
        instructions: format!(
            "Reply with one JSON object and nothing else. List everyone you expect {} to be connected to \
             at that step with a confidence between 0 and 1. Give one probability per category in the order \
             above. Set \"stage\" to {stage}. The object must match this schema:",
            user_label(user)
        ),
        response_schema: RESPONSE_SCHEMA.to_string(),
        neighbors: first,
        second_hop: second,
    })
}

// ---- parsing -----------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictedConnection {
    pub id: usize,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LlmForecast {
    pub connections: Vec<PredictedConnection>,
    pub activities: [f64; CATEGORY_COUNT],
    pub stage: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum ParseError {
    #[error("no JSON object found in response")]
    NoJson,
    #[error("response does not match the schema: {0}")]
    Schema(String),
    #[error("response names unknown user {0}")]
    UnknownUser(usize),
    #[error("{field} value {value} is out of range")]
    OutOfRange { field: &'static str, value: f64 },
}

impl ParseError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::NoJson => "no_json",
            Self::Schema(_) => "schema",
            Self::UnknownUser(_) => "unknown_user",
            Self::OutOfRange { .. } => "out_of_range",
        }
    }
}

/// First JSON object in `text` that parses, skipping prose and code fences.
fn first_object(text: &str) -> Option<Value> {
    text.match_indices('{').find_map(|(pos, _)| {
        let mut stream = serde_json::Deserializer::from_str(&text[pos..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(v @ Value::Object(_))) => Some(v),
            _ => None,
        }
    })
}

/// Extracts and validates a forecast for a network of `user_count` users.
pub fn parse_response(text: &str, user_count: usize) -> Result<LlmForecast, ParseError> {
    let value = first_object(text).ok_or(ParseError::NoJson)?;
    let forecast: LlmForecast = serde_json::from_value(value).map_err(|e| ParseError::Schema(e.to_string()))?;
    for c in &forecast.connections {
        if c.id >= user_count {
            return Err(ParseError::UnknownUser(c.id));
        }
        if !(0.0..=1.0).contains(&c.confidence) {
            return Err(ParseError::OutOfRange { field: "confidence", value: c.confidence });
        }
    }
    if let Some(&a) = forecast.activities.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(ParseError::OutOfRange { field: "activities", value: a });
    }
    if !(1..=MAX_HORIZON).contains(&forecast.stage) {
        return Err(ParseError::OutOfRange { field: "stage", value: forecast.stage as f64 });
    }
    Ok(forecast)
}

// ---- providers ---------------------------------------------------------------

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum ProviderError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("request timed out")]
    Timeout,
}

pub trait CompletionProvider: Send + Sync {
    fn complete(&self, bundle: &PromptBundle) -> Result<String, ProviderError>;

    /// Upper bound on requests in flight during an evaluation sweep.
    fn concurrency(&self) -> usize {
        1
    }
}

/// Offline provider: a schema-valid answer seeded by the SHA-256 of the rendered prompt.
/// Current neighbours get confidences in `[0.5, 1)`, second-hop users in `[0, 0.5)`.
#[derive(Clone, Copy, Debug, Default)]
pub struct StubProvider;

impl CompletionProvider for StubProvider {
    fn complete(&self, bundle: &PromptBundle) -> Result<String, ProviderError> {
        let digest = Sha256::digest(bundle.render().as_bytes());
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);
        let mut connections = Vec::new();
        for &v in &bundle.neighbors {
            connections.push(PredictedConnection { id: v, confidence: 0.5 + 0.5 * rng.random::<f64>() });
        }
        for &v in &bundle.second_hop {
            connections.push(PredictedConnection { id: v, confidence: 0.5 * rng.random::<f64>() });
        }
        let mut activities = [0.0; CATEGORY_COUNT];
        for a in activities.iter_mut() {
            *a = (rng.random::<f64>() * 1e6).round() / 1e6;
        }
        for c in connections.iter_mut() {
            c.confidence = (c.confidence * 1e6).round() / 1e6;
        }
        let forecast = LlmForecast { connections, activities, stage: bundle.stage, rationale: None };
        let body = serde_json::to_string_pretty(&forecast).expect("forecast serialises");
        Ok(format!("Here is the forecast.\n```json\n{body}\n```\n"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpProviderConfig {
    pub url: String,
    pub model: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
}

fn default_timeout_ms() -> u64 {
    60_000
}

fn default_concurrency() -> usize {
    DEFAULT_CONCURRENCY
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
}

#[derive(Deserialize)]
struct ChatResponse {
    content: String,
}

/// `POST {model, messages:[{role, content}]}` -> `{content}`.
#[derive(Clone, Debug)]
pub struct HttpProvider {
    config: HttpProviderConfig,
    agent: ureq::Agent,
}

impl HttpProvider {
    pub fn new(config: HttpProviderConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .build()
            .into();
        Self { config, agent }
    }
}

impl CompletionProvider for HttpProvider {
    fn complete(&self, bundle: &PromptBundle) -> Result<String, ProviderError> {
        let prompt = bundle.render();
        let request = ChatRequest {
            model: &self.config.model,
            messages: vec![ChatMessage { role: "user", content: &prompt }],
        };
        let transport = |e: ureq::Error| match e {
            ureq::Error::Timeout(_) => ProviderError::Timeout,
            other => ProviderError::Transport(other.to_string()),
        };
        let mut response = self.agent.post(&self.config.url).send_json(&request).map_err(transport)?;
        let body: ChatResponse = response.body_mut().read_json().map_err(transport)?;
        Ok(body.content)
    }

    fn concurrency(&self) -> usize {
        self.config.concurrency.max(1)
    }
}

// ---- evaluation --------------------------------------------------------------

#[derive(Debug, Error)]
pub enum LlmEvalError {
    #[error(transparent)]
    Split(#[from] GraphGenError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Outcome of one `(stage, user)` request.
#[derive(Clone, Debug, PartialEq)]
pub enum PromptOutcome {
    Parsed(LlmForecast),
    ParseFailed(ParseError),
    ProviderFailed(ProviderError),
}

fn run_requests(bundles: &[PromptBundle], provider: &dyn CompletionProvider) -> Vec<PromptOutcome> {
    let workers = provider.concurrency().clamp(1, bundles.len().max(1));
    let next = AtomicUsize::new(0);
    let mut results: Vec<Option<PromptOutcome>> = vec![None; bundles.len()];
    let chunks: Vec<Vec<(usize, PromptOutcome)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                scope.spawn(|| {
                    let mut done = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        let Some(bundle) = bundles.get(i) else { break };
                        let outcome = match provider.complete(bundle) {
                            Ok(text) => match parse_response(&text, bundle.user_count) {
                                Ok(f) => PromptOutcome::Parsed(f),
                                Err(e) => PromptOutcome::ParseFailed(e),
                            },
                            Err(e) => PromptOutcome::ProviderFailed(e),
                        };
                        done.push((i, outcome));
                    }
                    done
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    for (i, outcome) in chunks.into_iter().flatten() {
        results[i] = Some(outcome);
    }
    results.into_iter().map(|r| r.expect("every request answered")).collect()
}

/// Turns per-user forecasts for one stage into score matrices. Undirected scores take
/// the larger confidence of the two directions; users without a forecast score zero.
pub fn stage_prediction(stage: usize, n: usize, directed: bool, forecasts: &[Option<LlmForecast>]) -> StagePrediction {
    let mut edge_scores = Array2::zeros((n, n));
    let mut activity = Array2::zeros((n, CATEGORY_COUNT));
    for (u, f) in forecasts.iter().enumerate() {
        let Some(f) = f else { continue };
        for c in &f.connections {
            if c.id == u {
                continue;
            }
            let cell: &mut f64 = &mut edge_scores[[u, c.id]];
            *cell = cell.max(c.confidence);
            if !directed {
                let mirror: &mut f64 = &mut edge_scores[[c.id, u]];
                *mirror = mirror.max(c.confidence);
            }
        }
        for (k, &a) in f.activities.iter().enumerate() {
            activity[[u, k]] = a;
        }
    }
    StagePrediction { stage, edge_scores, activity }
}

/// Prompts every user at every stage of the held-out horizon and scores the parsed answers.
/// Failed requests count towards `parse_failures` and score as empty predictions.
pub fn evaluate_llm_path(
    ds: &TemporalDataset,
    provider: &dyn CompletionProvider,
    horizon: usize,
    seed: u64,
) -> Result<EvalReport, LlmEvalError> {
    let (conditioning, target) = split_dataset(ds, horizon)?;
    let n = ds.user_count();
    let mut bundles = Vec::with_capacity(horizon * n);
    for stage in 1..=horizon {
        for u in 0..n {
            bundles.push(build_prompt(u, &conditioning, stage)?);
        }
    }
    let outcomes = run_requests(&bundles, provider);
    let mut failures = 0;
    let mut predictions = Vec::with_capacity(horizon);
    for (s, chunk) in outcomes.chunks(n).enumerate() {
        let stage = s + 1;
        let forecasts: Vec<Option<LlmForecast>> = chunk
            .iter()
            .map(|o| match o {
                PromptOutcome::Parsed(f) if f.stage == stage => Some(f.clone()),
                _ => {
                    failures += 1;
                    None
                }
            })
            .collect();
        predictions.push(stage_prediction(stage, n, ds.directed, &forecasts));
    }
    let mut report = score_forecasts(&predictions, &conditioning, &target, seed)?;
    report.parse_failures = failures;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphgen::{generate, GeneratorConfig};

    fn small() -> TemporalDataset {
        let config = GeneratorConfig { users: 12, steps: 6, growth_rate: 0.05, ..GeneratorConfig::default() };
        generate(&config, 3).unwrap()
    }

    #[test]
    fn prompt_is_deterministic_and_labelled_once() {
        let ds = small();
        let a = build_prompt(2, &ds, 1).unwrap().render();
        assert_eq!(a, build_prompt(2, &ds, 1).unwrap().render());
        for label in STRUCTURAL_LABELS {
            assert_eq!(a.matches(&format!("## {label}\n")).count(), 1, "{label}");
        }
        for section in DataSection::ALL {
            assert_eq!(a.matches(section.label()).count(), 1, "{section}");
        }
        let positions: Vec<usize> = DataSection::ALL.iter().map(|s| a.find(s.label()).unwrap()).collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn isolated_user_graph_section() {
        let mut ds = small();
        let n = ds.user_count();
        for snap in ds.snapshots.iter_mut() {
            snap.adjacency = crate::graphgen::Adjacency::empty(n, false);
        }
        let b = build_prompt(0, &ds, 2).unwrap();
        assert_eq!(b.section(DataSection::UserGraph), "no connections");
        assert!(b.render().contains("### User Graph\nno connections\n"));
    }

    #[test]
    fn prompt_preconditions() {
        let ds = small();
        assert_eq!(build_prompt(99, &ds, 1), Err(PromptError::UnknownUser(99)));
        assert_eq!(build_prompt(0, &ds, 0), Err(PromptError::BadStage(0)));
        assert_eq!(build_prompt(0, &ds, 5), Err(PromptError::BadStage(5)));
    }

    const VALID: &str =
        r#"{"connections":[{"id":3,"confidence":0.8}],"activities":[0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8],"stage":2}"#;

    #[test]
    fn parse_exact_and_embedded() {
        let f = parse_response(VALID, 12).unwrap();
        assert_eq!(f.connections, vec![PredictedConnection { id: 3, confidence: 0.8 }]);
        assert_eq!(f.stage, 2);
        let wrapped = format!("Sure! {{not json}} here you go:\n```json\n{VALID}\n```\nThanks.");
        assert_eq!(parse_response(&wrapped, 12).unwrap(), f);
    }

    #[test]
    fn parse_errors_are_distinct() {
        assert_eq!(parse_response("no braces at all", 12), Err(ParseError::NoJson));
        assert!(matches!(parse_response(r#"{"connections": []}"#, 12), Err(ParseError::Schema(_))));
        let short = r#"{"connections":[],"activities":[0.1],"stage":1}"#;
        assert!(matches!(parse_response(short, 12), Err(ParseError::Schema(_))));
        assert_eq!(parse_response(VALID, 3), Err(ParseError::UnknownUser(3)));
        let hot = VALID.replace("0.8}", "1.7}");
        assert_eq!(parse_response(&hot, 12), Err(ParseError::OutOfRange { field: "confidence", value: 1.7 }));
        let late = VALID.replace("\"stage\":2", "\"stage\":9");
        assert!(matches!(parse_response(&late, 12), Err(ParseError::OutOfRange { field: "stage", .. })));
        let codes: BTreeSet<&str> = [
            ParseError::NoJson,
            ParseError::Schema(String::new()),
            ParseError::UnknownUser(0),
            ParseError::OutOfRange { field: "x", value: 0.0 },
        ]
        .iter()
        .map(ParseError::code)
        .collect();
        assert_eq!(codes.len(), 4);
    }

    #[test]
    fn stub_is_deterministic_and_parseable() {
        let ds = small();
        for u in 0..ds.user_count() {
            for stage in 1..=MAX_HORIZON {
                let b = build_prompt(u, &ds, stage).unwrap();
                let text = StubProvider.complete(&b).unwrap();
                assert_eq!(text, StubProvider.complete(&b).unwrap());
                let f = parse_response(&text, ds.user_count()).unwrap();
                assert_eq!(f.stage, stage);
            }
        }
    }

    #[test]
    fn unreachable_endpoint_is_a_transport_error() {
        let provider = HttpProvider::new(HttpProviderConfig {
            url: "http://127.0.0.1:9/chat".into(),
            model: "m".into(),
            timeout_ms: 2_000,
            concurrency: 1,
        });
        let b = build_prompt(0, &small(), 1).unwrap();
        assert!(matches!(provider.complete(&b), Err(ProviderError::Transport(_) | ProviderError::Timeout)));
    }
}
