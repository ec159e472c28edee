//! Deterministic synthetic temporal social networks.
//!
//! Every dataset is a pure function of `(GeneratorConfig, seed)`. Three signals are
//! planted so a model has something to recover:
//!
//! - **homophily**: pairs sharing a location or occupation form ties more often;
//! - **triadic closure**: an open wedge `a-b-c` closes into `a-c` with the configured
//!   probability per step (a pair with `k` wedges closes with `1 - (1 - p)^k`);
//! - **interest drift**: each user's category mixture moves toward the mean mixture of
//!   its closed neighbourhood, plus an optional pull toward an anchor category that is
//!   chosen jointly from demographics (age band, occupation) and last-step engagement.
//!
//! Graph decisions, profile draws and content draws use separate ChaCha streams, and
//! every candidate pair consumes exactly two uniforms per step. Runs that differ only
//! in closure or homophily strength therefore share their random draws, which makes
//! edge counts monotone in the closure probability for a fixed seed.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::argmax;

pub const DATASET_SCHEMA_VERSION: u32 = 1;
/// Number of post/activity categories.
pub const CATEGORY_COUNT: usize = 8;
/// Minimum number of steps: a four-stage horizon plus one conditioning step.
pub const MIN_STEPS: usize = 5;
pub const MIN_USERS: usize = 4;
/// Users younger than this follow their own engagement; older users follow their occupation.
pub const ENGAGEMENT_DRIVEN_AGE: u32 = 30;

pub const DEFAULT_CATEGORIES: [&str; CATEGORY_COUNT] = [
    "Politics",
    "Education",
    "Sports",
    "Travel",
    "Entertainment",
    "Health",
    "Technology",
    "Lifestyle",
];

const DEFAULT_GENDERS: [&str; 3] = ["female", "male", "nonbinary"];
// occupation i prefers category i mod 8
const DEFAULT_OCCUPATIONS: [&str; 8] = [
    "journalist",
    "teacher",
    "athlete",
    "tour-guide",
    "musician",
    "nurse",
    "engineer",
    "designer",
];
const DEFAULT_LOCATIONS: [&str; 12] = ["US", "GB", "DE", "IN", "BR", "JP", "FR", "CA", "MX", "NG", "KR", "AU"];

const KEYWORDS: [[&str; 10]; CATEGORY_COUNT] = [
    ["election", "senate", "policy", "vote", "campaign", "parliament", "debate", "minister", "reform", "ballot"],
    ["school", "lecture", "exam", "university", "homework", "teacher", "course", "library", "degree", "study"],
    ["football", "match", "goal", "league", "training", "coach", "score", "marathon", "team", "stadium"],
    ["flight", "beach", "hotel", "passport", "journey", "island", "museum", "backpack", "mountain", "tour"],
    ["movie", "concert", "series", "album", "festival", "actor", "premiere", "comedy", "stream", "gig"],
    ["fitness", "doctor", "diet", "sleep", "vaccine", "yoga", "clinic", "wellness", "therapy", "nutrition"],
    ["software", "gadget", "startup", "robot", "smartphone", "coding", "cloud", "chip", "app", "laptop"],
    ["fashion", "recipe", "coffee", "garden", "home", "style", "brunch", "decor", "pets", "weekend"],
];

const FILLER: [&str; 12] = [
    "the", "a", "and", "to", "of", "in", "my", "with", "this", "today", "so", "great",
];

/// Keyword pool used to write posts for category `category`.
pub fn category_keywords(category: usize) -> &'static [&'static str] {
    &KEYWORDS[category % CATEGORY_COUNT]
}

/// The category that occupation `occupation` gravitates toward.
pub fn preferred_category(occupation: usize) -> usize {
    occupation % CATEGORY_COUNT
}

#[derive(Debug, Error, PartialEq)]
pub enum GraphGenError {
    #[error("users must be at least {MIN_USERS}, got {0}")]
    TooFewUsers(usize),
    #[error("steps must be at least {MIN_STEPS}, got {0}")]
    TooFewSteps(usize),
    #[error("{name} must lie in [0, 1], got {value}")]
    ProbabilityOutOfRange { name: &'static str, value: f64 },
    #[error("invalid generator setting: {0}")]
    InvalidSetting(String),
    #[error("horizon {horizon} must be smaller than the number of steps {steps}")]
    HorizonTooLarge { horizon: usize, steps: usize },
    #[error("malformed dataset: {0}")]
    Malformed(String),
}

/// Closed vocabularies declared in the dataset header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Vocabularies {
    pub categories: Vec<String>,
    pub genders: Vec<String>,
    pub occupations: Vec<String>,
    pub locations: Vec<String>,
}

impl Default for Vocabularies {
    fn default() -> Self {
        let own = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        Self {
            categories: own(&DEFAULT_CATEGORIES),
            genders: own(&DEFAULT_GENDERS),
            occupations: own(&DEFAULT_OCCUPATIONS),
            locations: own(&DEFAULT_LOCATIONS),
        }
    }
}

impl Vocabularies {
    pub fn validate(&self) -> Result<(), GraphGenError> {
        if self.categories.len() != CATEGORY_COUNT {
            return Err(GraphGenError::InvalidSetting(format!(
                "category vocabulary must have {CATEGORY_COUNT} entries, got {}",
                self.categories.len()
            )));
        }
        for (name, v) in [
            ("gender", &self.genders),
            ("occupation", &self.occupations),
            ("location", &self.locations),
        ] {
            if v.is_empty() {
                return Err(GraphGenError::InvalidSetting(format!("{name} vocabulary is empty")));
            }
        }
        Ok(())
    }

    /// Width of the one-hot demographic block plus the z-scored age column.
    pub fn demographic_width(&self) -> usize {
        1 + self.genders.len() + self.occupations.len() + self.locations.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemographicProfile {
    pub age: u32,
    pub gender: usize,
    pub occupation: usize,
    pub location: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Post {
    pub category: usize,
    pub text: String,
    pub step: usize,
}

/// Engagement kinds, in storage order.
pub const ENGAGEMENT_KINDS: [&str; 3] = ["reactions", "comments", "shares"];

/// Per-category `[reactions, comments, shares]` counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EngagementRecord {
    pub counts: [[u64; 3]; CATEGORY_COUNT],
}

impl EngagementRecord {
    pub fn is_empty(&self) -> bool {
        self.counts.iter().flatten().all(|&c| c == 0)
    }

    pub fn category_total(&self, category: usize) -> u64 {
        self.counts[category].iter().sum()
    }
}

/// Dense boolean adjacency matrix.
#[derive(Clone, PartialEq, Eq)]
pub struct Adjacency {
    n: usize,
    directed: bool,
    cells: Vec<bool>,
}

impl fmt::Debug for Adjacency {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Adjacency")
            .field("n", &self.n)
            .field("directed", &self.directed)
            .field("edges", &self.edges())
            .finish()
    }
}

impl Adjacency {
    pub fn empty(n: usize, directed: bool) -> Self {
        Self { n, directed, cells: vec![false; n * n] }
    }

    pub fn from_edges(n: usize, directed: bool, edges: &[(usize, usize)]) -> Result<Self, GraphGenError> {
        let mut adj = Self::empty(n, directed);
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(GraphGenError::Malformed(format!("edge ({i}, {j}) outside {n} users")));
            }
            if i == j {
                return Err(GraphGenError::Malformed(format!("self loop on user {i}")));
            }
            adj.insert(i, j);
        }
        Ok(adj)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn directed(&self) -> bool {
        self.directed
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.cells[i * self.n + j]
    }

    /// Adds `i -> j` (and `j -> i` when undirected). Self loops are ignored.
    pub fn insert(&mut self, i: usize, j: usize) {
        if i == j {
            return;
        }
        self.cells[i * self.n + j] = true;
        if !self.directed {
            self.cells[j * self.n + i] = true;
        }
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n).filter(move |&j| self.has_edge(i, j))
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors(i).count()
    }

    /// Edge list; `i < j` for undirected graphs, ordered pairs otherwise.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in 0..self.n {
                if self.has_edge(i, j) && (self.directed || i < j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn edge_count(&self) -> usize {
        self.edges().len()
    }

    /// Candidate pairs in canonical order: `i < j` undirected, all `i != j` directed.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in 0..self.n {
                if i != j && (self.directed || i < j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn union(&self, other: &Adjacency) -> Adjacency {
        let mut out = self.clone();
        for (c, o) in out.cells.iter_mut().zip(&other.cells) {
            *c |= *o;
        }
        out
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| (0..self.n).all(|j| self.has_edge(i, j) == self.has_edge(j, i)))
    }

    pub fn has_zero_diagonal(&self) -> bool {
        (0..self.n).all(|i| !self.has_edge(i, i))
    }

    pub fn is_connected(&self) -> bool {
        if self.n == 0 {
            return true;
        }
        let mut seen = vec![false; self.n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for j in 0..self.n {
                if (self.has_edge(i, j) || self.has_edge(j, i)) && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    fn common_neighbors(&self, i: usize, j: usize) -> usize {
        (0..self.n).filter(|&m| self.has_edge(i, m) && self.has_edge(m, j)).count()
    }
}

/// One time step of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub step: usize,
    pub adjacency: Adjacency,
    /// Posts per user.
    pub posts: Vec<Vec<Post>>,
    pub engagement: Vec<EngagementRecord>,
}

impl Snapshot {
    /// Posts per category for `user`.
    pub fn category_counts(&self, user: usize) -> [f64; CATEGORY_COUNT] {
        let mut counts = [0.0; CATEGORY_COUNT];
        for post in &self.posts[user] {
            counts[post.category] += 1.0;
        }
        counts
    }

    /// The same snapshot with posts and engagement removed.
    pub fn masked(&self) -> Snapshot {
        Snapshot {
            step: self.step,
            adjacency: self.adjacency.clone(),
            posts: vec![Vec::new(); self.posts.len()],
            engagement: vec![EngagementRecord::default(); self.engagement.len()],
        }
    }
}

/// Ordered snapshots over a fixed user population. Immutable once built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "DatasetFile", try_from = "DatasetFile")]
pub struct TemporalDataset {
    pub seed: u64,
    pub directed: bool,
    pub vocabularies: Vocabularies,
    pub profiles: Vec<DemographicProfile>,
    pub snapshots: Vec<Snapshot>,
    /// Steps held out as forecasting targets (empty until split).
    pub held_out: Vec<usize>,
}

impl TemporalDataset {
    pub fn user_count(&self) -> usize {
        self.profiles.len()
    }

    pub fn step_count(&self) -> usize {
        self.snapshots.len()
    }

    pub fn last(&self) -> &Snapshot {
        self.snapshots.last().expect("dataset has at least one snapshot")
    }

    fn with_snapshots(&self, snapshots: Vec<Snapshot>, held_out: Vec<usize>) -> Self {
        Self {
            seed: self.seed,
            directed: self.directed,
            vocabularies: self.vocabularies.clone(),
            profiles: self.profiles.clone(),
            snapshots,
            held_out,
        }
    }

    /// Parse a dataset document.
    pub fn from_json(text: &str) -> Result<Self, GraphGenError> {
        serde_json::from_str(text).map_err(|e| GraphGenError::Malformed(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("dataset serialization cannot fail")
    }
}

/// Generator knobs. Probabilities live in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub users: usize,
    pub steps: usize,
    pub homophily: f64,
    pub closure: f64,
    pub drift: f64,
    /// Per-step pull of each mixture toward its demographic/engagement anchor category.
    pub interest_pull: f64,
    /// Share of engagement that follows the posting mixture; the rest follows a fixed
    /// per-user engagement interest.
    pub engagement_overlap: f64,
    /// Tie probability between two attribute-average users in the first snapshot.
    pub initial_density: f64,
    /// Per-step tie probability between two attribute-average, unconnected users.
    pub growth_rate: f64,
    pub directed: bool,
    pub min_posts: usize,
    pub max_posts: usize,
    pub vocabularies: Vocabularies,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            users: 24,
            steps: 8,
            homophily: 0.8,
            closure: 0.0,
            drift: 0.5,
            interest_pull: 0.5,
            engagement_overlap: 0.3,
            initial_density: 0.15,
            growth_rate: 0.01,
            directed: false,
            min_posts: 8,
            max_posts: 16,
            vocabularies: Vocabularies::default(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), GraphGenError> {
        if self.users < MIN_USERS {
            return Err(GraphGenError::TooFewUsers(self.users));
        }
        if self.steps < MIN_STEPS {
            return Err(GraphGenError::TooFewSteps(self.steps));
        }
        for (name, value) in [
            ("homophily", self.homophily),
            ("closure", self.closure),
            ("drift", self.drift),
            ("interest_pull", self.interest_pull),
            ("engagement_overlap", self.engagement_overlap),
            ("initial_density", self.initial_density),
            ("growth_rate", self.growth_rate),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(GraphGenError::ProbabilityOutOfRange { name, value });
            }
        }
        if self.min_posts == 0 || self.min_posts > self.max_posts {
            return Err(GraphGenError::InvalidSetting(format!(
                "post range {}..={} is empty or allows zero posts",
                self.min_posts, self.max_posts
            )));
        }
        self.vocabularies.validate()
    }

    /// Multiplier on the base tie rate for a pair. Averages to 1 over random pairs,
    /// and is identically 1 when homophily is zero.
    fn affinity(&self, a: &DemographicProfile, b: &DemographicProfile) -> f64 {
        let v = &self.vocabularies;
        let expected = 0.5 * (1.0 / v.locations.len() as f64 + 1.0 / v.occupations.len() as f64);
        let shared = 0.5
            * ((a.location == b.location) as u8 as f64 + (a.occupation == b.occupation) as u8 as f64);
        (1.0 - self.homophily) + self.homophily * shared / expected
    }
}

/// Generator output together with the hidden per-step category mixtures.
#[derive(Clone, Debug)]
pub struct GenerationTrace {
    pub dataset: TemporalDataset,
    /// `mixtures[t][user]` is the category distribution that produced step `t`'s posts.
    pub mixtures: Vec<Vec<[f64; CATEGORY_COUNT]>>,
}

/// Generate a dataset; see the module docs for the planted signals.
pub fn generate(config: &GeneratorConfig, seed: u64) -> Result<TemporalDataset, GraphGenError> {
    generate_with_trace(config, seed).map(|t| t.dataset)
}

struct Streams {
    profiles: ChaCha8Rng,
    graph: ChaCha8Rng,
    content: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let stream = |s: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(s);
            rng
        };
        Self { profiles: stream(0), graph: stream(1), content: stream(2) }
    }
}

pub fn generate_with_trace(config: &GeneratorConfig, seed: u64) -> Result<GenerationTrace, GraphGenError> {
    config.validate()?;
    let n = config.users;
    let vocab = &config.vocabularies;
    let mut rng = Streams::new(seed);

    let profiles: Vec<DemographicProfile> = (0..n)
        .map(|_| DemographicProfile {
            age: rng.profiles.random_range(16..=65),
            gender: rng.profiles.random_range(0..vocab.genders.len()),
            occupation: rng.profiles.random_range(0..vocab.occupations.len()),
            location: rng.profiles.random_range(0..vocab.locations.len()),
        })
        .collect();
    let volumes: Vec<usize> = (0..n)
        .map(|_| rng.profiles.random_range(config.min_posts..=config.max_posts))
        .collect();
    let propensity: Vec<f64> = (0..n).map(|_| rng.profiles.random_range(0.5..2.0)).collect();
    let gamma = Gamma::new(0.6, 1.0).expect("valid gamma parameters");
    let mut mixture: Vec<[f64; CATEGORY_COUNT]> = profiles
        .iter()
        .map(|p| {
            let mut m = [0.0; CATEGORY_COUNT];
            for v in m.iter_mut() {
                *v = gamma.sample(&mut rng.profiles);
            }
            m[preferred_category(p.occupation)] += 0.5 * m.iter().sum::<f64>().max(1e-3);
            normalize(&mut m);
            m
        })
        .collect();

    let interest: Vec<[f64; CATEGORY_COUNT]> = (0..n)
        .map(|_| {
            let mut m = [0.0; CATEGORY_COUNT];
            for v in m.iter_mut() {
                *v = gamma.sample(&mut rng.profiles);
            }
            normalize(&mut m);
            m
        })
        .collect();

    let mut adjacency = Adjacency::empty(n, config.directed);
    for (i, j) in adjacency.pairs() {
        let p = (config.initial_density * config.affinity(&profiles[i], &profiles[j])).min(1.0);
        if rng.graph.random::<f64>() < p {
            adjacency.insert(i, j);
        }
    }

    let mut snapshots = Vec::with_capacity(config.steps);
    let mut mixtures = Vec::with_capacity(config.steps);
    for step in 1..=config.steps {
        let posts: Vec<Vec<Post>> = (0..n)
            .map(|u| write_posts(&mixture[u], volumes[u], step, &mut rng.content))
            .collect();
        let engagement: Vec<EngagementRecord> = (0..n)
            .map(|u| {
                let mut target = [0.0; CATEGORY_COUNT];
                for c in 0..CATEGORY_COUNT {
                    target[c] = config.engagement_overlap * mixture[u][c]
                        + (1.0 - config.engagement_overlap) * interest[u][c];
                }
                draw_engagement(&target, propensity[u], &mut rng.content)
            })
            .collect();
        mixtures.push(mixture.clone());

        if step < config.steps {
            let next_adj = next_adjacency(&adjacency, &profiles, config, &mut rng.graph);
            mixture = drift_mixtures(&mixture, &adjacency, &profiles, &engagement, config);
            snapshots.push(Snapshot { step, adjacency, posts, engagement });
            adjacency = next_adj;
        } else {
            snapshots.push(Snapshot { step, adjacency: adjacency.clone(), posts, engagement });
        }
    }

    let dataset = TemporalDataset {
        seed,
        directed: config.directed,
        vocabularies: vocab.clone(),
        profiles,
        snapshots,
        held_out: Vec::new(),
    };
    Ok(GenerationTrace { dataset, mixtures })
}

/// One graph transition: edges persist, wedges close, homophilous ties form.
///
/// Each candidate pair consumes exactly two uniforms regardless of outcome.
pub fn next_adjacency<R: Rng + ?Sized>(
    current: &Adjacency,
    profiles: &[DemographicProfile],
    config: &GeneratorConfig,
    rng: &mut R,
) -> Adjacency {
    let mut next = current.clone();
    for (i, j) in current.pairs() {
        let u_close: f64 = rng.random();
        let u_form: f64 = rng.random();
        if current.has_edge(i, j) {
            continue;
        }
        let wedges = current.common_neighbors(i, j) as i32;
        let p_close = if wedges > 0 { 1.0 - (1.0 - config.closure).powi(wedges) } else { 0.0 };
        let p_form = (config.growth_rate * config.affinity(&profiles[i], &profiles[j])).min(1.0);
        if u_close < p_close || u_form < p_form {
            next.insert(i, j);
        }
    }
    next
}

fn drift_mixtures(
    mixture: &[[f64; CATEGORY_COUNT]],
    adjacency: &Adjacency,
    profiles: &[DemographicProfile],
    engagement: &[EngagementRecord],
    config: &GeneratorConfig,
) -> Vec<[f64; CATEGORY_COUNT]> {
    (0..mixture.len())
        .map(|u| {
            let mut hood = [0.0; CATEGORY_COUNT];
            let mut members = 0.0;
            for v in std::iter::once(u).chain(adjacency.neighbors(u)) {
                for (h, m) in hood.iter_mut().zip(&mixture[v]) {
                    *h += m;
                }
                members += 1.0;
            }
            let anchor = if profiles[u].age < ENGAGEMENT_DRIVEN_AGE && !engagement[u].is_empty() {
                let totals: Vec<f64> =
                    (0..CATEGORY_COUNT).map(|c| engagement[u].category_total(c) as f64).collect();
                argmax(&totals)
            } else {
                preferred_category(profiles[u].occupation)
            };
            let mut next = [0.0; CATEGORY_COUNT];
            for c in 0..CATEGORY_COUNT {
                let social = (1.0 - config.drift) * mixture[u][c] + config.drift * hood[c] / members;
                let pull = if c == anchor { config.interest_pull } else { 0.0 };
                next[c] = (1.0 - config.interest_pull) * social + pull;
            }
            normalize(&mut next);
            next
        })
        .collect()
}

fn normalize(m: &mut [f64; CATEGORY_COUNT]) {
    let total: f64 = m.iter().sum();
    if total > 0.0 {
        m.iter_mut().for_each(|v| *v /= total);
    } else {
        m.iter_mut().for_each(|v| *v = 1.0 / CATEGORY_COUNT as f64);
    }
}

fn sample_category<R: Rng + ?Sized>(mixture: &[f64; CATEGORY_COUNT], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (c, &p) in mixture.iter().enumerate() {
        acc += p;
        if u < acc {
            return c;
        }
    }
    CATEGORY_COUNT - 1
}

fn write_posts<R: Rng + ?Sized>(
    mixture: &[f64; CATEGORY_COUNT],
    volume: usize,
    step: usize,
    rng: &mut R,
) -> Vec<Post> {
    (0..volume)
        .map(|_| {
            let category = sample_category(mixture, rng);
            let len = rng.random_range(5..=9);
            let words: Vec<&str> = (0..len)
                .map(|_| {
                    if rng.random::<f64>() < 0.7 {
                        let pool = category_keywords(category);
                        pool[rng.random_range(0..pool.len())]
                    } else {
                        FILLER[rng.random_range(0..FILLER.len())]
                    }
                })
                .collect();
            Post { category, text: words.join(" "), step }
        })
        .collect()
}

fn draw_engagement<R: Rng + ?Sized>(
    mixture: &[f64; CATEGORY_COUNT],
    propensity: f64,
    rng: &mut R,
) -> EngagementRecord {
    const RATES: [f64; 3] = [40.0, 16.0, 6.0];
    let mut rec = EngagementRecord::default();
    for (c, &m) in mixture.iter().enumerate() {
        for (k, rate) in RATES.iter().enumerate() {
            let lambda = m * propensity * rate;
            if lambda > 0.0 {
                let draw: f64 = Poisson::new(lambda).expect("positive rate").sample(rng);
                rec.counts[c][k] = draw as u64;
            }
        }
    }
    rec
}

/// Split off the final `horizon` steps as targets.
pub fn split_dataset(
    ds: &TemporalDataset,
    horizon: usize,
) -> Result<(TemporalDataset, TemporalDataset), GraphGenError> {
    let steps = ds.step_count();
    if horizon == 0 || horizon >= steps {
        return Err(GraphGenError::HorizonTooLarge { horizon, steps });
    }
    let cut = steps - horizon;
    let target_steps: Vec<usize> = ds.snapshots[cut..].iter().map(|s| s.step).collect();
    let conditioning = ds.with_snapshots(ds.snapshots[..cut].to_vec(), Vec::new());
    let target = ds.with_snapshots(ds.snapshots[cut..].to_vec(), target_steps);
    Ok((conditioning, target))
}

// ---- on-disk representation ----------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetFile {
    schema_version: u32,
    seed: u64,
    directed: bool,
    category_vocabulary: Vec<String>,
    genders: Vec<String>,
    occupations: Vec<String>,
    locations: Vec<String>,
    users: Vec<UserEntry>,
    snapshots: Vec<SnapshotEntry>,
    #[serde(default)]
    held_out: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UserEntry {
    id: usize,
    profile: DemographicProfile,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SnapshotEntry {
    step: usize,
    edges: Vec<[usize; 2]>,
    posts: Vec<PostEntry>,
    engagement: Vec<EngagementRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PostEntry {
    user: usize,
    category: usize,
    text: String,
}

impl From<TemporalDataset> for DatasetFile {
    fn from(ds: TemporalDataset) -> Self {
        let users = ds
            .profiles
            .iter()
            .enumerate()
            .map(|(id, profile)| UserEntry { id, profile: profile.clone() })
            .collect();
        let snapshots = ds
            .snapshots
            .iter()
            .map(|s| SnapshotEntry {
                step: s.step,
                edges: s.adjacency.edges().into_iter().map(|(i, j)| [i, j]).collect(),
                posts: s
                    .posts
                    .iter()
                    .enumerate()
                    .flat_map(|(user, ps)| {
                        ps.iter().map(move |p| PostEntry { user, category: p.category, text: p.text.clone() })
                    })
                    .collect(),
                engagement: s.engagement.clone(),
            })
            .collect();
        let v = ds.vocabularies;
        DatasetFile {
            schema_version: DATASET_SCHEMA_VERSION,
            seed: ds.seed,
            directed: ds.directed,
            category_vocabulary: v.categories,
            genders: v.genders,
            occupations: v.occupations,
            locations: v.locations,
            users,
            snapshots,
            held_out: ds.held_out,
        }
    }
}

impl TryFrom<DatasetFile> for TemporalDataset {
    type Error = GraphGenError;

    fn try_from(f: DatasetFile) -> Result<Self, Self::Error> {
        if f.schema_version != DATASET_SCHEMA_VERSION {
            return Err(GraphGenError::Malformed(format!(
                "unsupported dataset schema_version {} (expected {DATASET_SCHEMA_VERSION})",
                f.schema_version
            )));
        }
        let vocabularies = Vocabularies {
            categories: f.category_vocabulary,
            genders: f.genders,
            occupations: f.occupations,
            locations: f.locations,
        };
        vocabularies.validate()?;
        let n = f.users.len();
        let mut profiles = Vec::with_capacity(n);
        for (expected, user) in f.users.into_iter().enumerate() {
            if user.id != expected {
                return Err(GraphGenError::Malformed(format!("user ids must be 0..{n} in order")));
            }
            let p = user.profile;
            if !(13..=100).contains(&p.age)
                || p.gender >= vocabularies.genders.len()
                || p.occupation >= vocabularies.occupations.len()
                || p.location >= vocabularies.locations.len()
            {
                return Err(GraphGenError::Malformed(format!("profile of user {expected} out of range")));
            }
            profiles.push(p);
        }
        let mut snapshots = Vec::with_capacity(f.snapshots.len());
        for s in f.snapshots {
            let edges: Vec<(usize, usize)> = s.edges.iter().map(|e| (e[0], e[1])).collect();
            let adjacency = Adjacency::from_edges(n, f.directed, &edges)?;
            let mut posts = vec![Vec::new(); n];
            for p in s.posts {
                if p.user >= n || p.category >= CATEGORY_COUNT || p.text.trim().is_empty() {
                    return Err(GraphGenError::Malformed(format!("invalid post at step {}", s.step)));
                }
                posts[p.user].push(Post { category: p.category, text: p.text, step: s.step });
            }
            if s.engagement.len() != n {
                return Err(GraphGenError::Malformed(format!(
                    "step {} has {} engagement records for {n} users",
                    s.step,
                    s.engagement.len()
                )));
            }
            snapshots.push(Snapshot { step: s.step, adjacency, posts, engagement: s.engagement });
        }
        Ok(TemporalDataset {
            seed: f.seed,
            directed: f.directed,
            vocabularies,
            profiles,
            snapshots,
            held_out: f.held_out,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(users: usize, steps: usize) -> GeneratorConfig {
        GeneratorConfig { users, steps, ..GeneratorConfig::default() }
    }

    #[test]
    fn rejects_bad_configs() {
        assert_eq!(generate(&small(3, 8), 1).unwrap_err(), GraphGenError::TooFewUsers(3));
        assert_eq!(generate(&small(8, 4), 1).unwrap_err(), GraphGenError::TooFewSteps(4));
        let cfg = GeneratorConfig { closure: 1.5, ..small(8, 6) };
        assert!(matches!(
            generate(&cfg, 1),
            Err(GraphGenError::ProbabilityOutOfRange { name: "closure", .. })
        ));
        let cfg = GeneratorConfig { homophily: -0.1, ..small(8, 6) };
        assert!(generate(&cfg, 1).is_err());
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = small(12, 6);
        let a = generate(&cfg, 42).unwrap().to_json();
        let b = generate(&cfg, 42).unwrap().to_json();
        assert_eq!(a, b);
        assert_ne!(a, generate(&cfg, 43).unwrap().to_json());
    }

    #[test]
    fn forced_closure_closes_open_triangle() {
        let cfg = GeneratorConfig { closure: 1.0, growth_rate: 0.0, ..small(4, 5) };
        let profiles = vec![
            DemographicProfile { age: 20, gender: 0, occupation: 0, location: 0 };
            3
        ];
        let adj = Adjacency::from_edges(3, false, &[(0, 1), (1, 2)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let next = next_adjacency(&adj, &profiles, &cfg, &mut rng);
        assert!(next.has_edge(0, 2));
        assert!(next.has_edge(0, 1) && next.has_edge(1, 2));
    }

    #[test]
    fn snapshots_are_symmetric_without_self_loops() {
        let ds = generate(&small(16, 6), 5).unwrap();
        for s in &ds.snapshots {
            assert!(s.adjacency.is_symmetric());
            assert!(s.adjacency.has_zero_diagonal());
        }
    }

    #[test]
    fn directed_mode_can_be_asymmetric() {
        let cfg = GeneratorConfig { directed: true, initial_density: 0.3, ..small(16, 5) };
        let ds = generate(&cfg, 3).unwrap();
        assert!(ds.directed);
        assert!(ds.snapshots.iter().any(|s| !s.adjacency.is_symmetric()));
        assert!(ds.snapshots.iter().all(|s| s.adjacency.has_zero_diagonal()));
    }

    #[test]
    fn edges_persist_across_steps() {
        let ds = generate(&small(16, 7), 11).unwrap();
        for w in ds.snapshots.windows(2) {
            for (i, j) in w[0].adjacency.edges() {
                assert!(w[1].adjacency.has_edge(i, j));
            }
        }
    }

    #[test]
    fn split_sizes() {
        let ds = generate(&small(6, 10), 1).unwrap();
        let (c, t) = split_dataset(&ds, 4).unwrap();
        assert_eq!((c.step_count(), t.step_count()), (6, 4));
        assert_eq!(t.held_out, vec![7, 8, 9, 10]);

        let ds = generate(&small(6, 5), 1).unwrap();
        let (c, t) = split_dataset(&ds, 4).unwrap();
        assert_eq!((c.step_count(), t.step_count()), (1, 4));

        let mut short = ds.clone();
        short.snapshots.truncate(4);
        assert_eq!(
            split_dataset(&short, 4).unwrap_err(),
            GraphGenError::HorizonTooLarge { horizon: 4, steps: 4 }
        );
    }

    #[test]
    fn json_round_trip_preserves_dataset() {
        let ds = generate(&small(10, 5), 8).unwrap();
        let back = TemporalDataset::from_json(&ds.to_json()).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn rejects_wrong_schema_version() {
        let ds = generate(&small(5, 5), 8).unwrap();
        let text = ds.to_json().replacen("\"schema_version\": 1", "\"schema_version\": 99", 1);
        assert!(matches!(TemporalDataset::from_json(&text), Err(GraphGenError::Malformed(_))));
    }

    #[test]
    fn posts_are_never_empty_text() {
        let ds = generate(&small(8, 5), 2).unwrap();
        for s in &ds.snapshots {
            for p in s.posts.iter().flatten() {
                assert!(!p.text.is_empty());
                assert!(p.category < CATEGORY_COUNT);
                assert_eq!(p.step, s.step);
            }
        }
    }
}
