//! Per-user modality encoders.
//!
//! Three raw embeddings are produced for every user at every step:
//!
//! - `E_D`: a frozen two-layer mean-aggregation GNN over the snapshot adjacency, fed
//!   with z-scored age and one-hot gender/occupation/location;
//! - `E_P`: signed feature hashing of the user's post tokens, L2-normalised;
//! - `E_E`: min-max scaled reaction/comment/share counts followed by the hashed
//!   embedding of a plain-text engagement summary.
//!
//! All statistics (age mean/std, count bounds) are fitted on conditioning steps only
//! and stored with the encoder. The learned projections to a common width live in
//! [`crate::fusion::FusionParams`], not here.

use std::hash::Hasher;
use std::time::Duration;

use fnv::FnvHasher;
use ndarray::{Array1, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graphgen::{
    Adjacency, DemographicProfile, EngagementRecord, Post, Snapshot, TemporalDataset, Vocabularies,
    CATEGORY_COUNT, ENGAGEMENT_KINDS,
};
use crate::numeric::xavier;

/// Width of the min-max scaled count block (8 categories x 3 kinds).
pub const ENGAGEMENT_BLOCK: usize = CATEGORY_COUNT * 3;

const STOP_WORDS: [&str; 24] = [
    "a", "an", "and", "are", "as", "at", "be", "but", "by", "for", "in", "is", "it", "my", "of",
    "on", "or", "so", "that", "the", "this", "to", "was", "with",
];

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("feature matrix has {rows} rows but the graph has {nodes} nodes")]
    RowMismatch { rows: usize, nodes: usize },
    #[error("layer {layer} expects input width {expected}, got {actual}")]
    WidthMismatch { layer: usize, expected: usize, actual: usize },
    #[error(transparent)]
    External(#[from] ExternalEncodeError),
}

/// Failures of the external text encoder. Every variant means the caller must fall back.
#[derive(Debug, Error)]
pub enum ExternalEncodeError {
    #[error("external encoder transport failure: {0}")]
    Transport(String),
    #[error("external encoder returned {actual} vectors of width {width}, expected {expected_count} of width {expected_width}")]
    DimensionMismatch { expected_count: usize, expected_width: usize, actual: usize, width: usize },
    #[error("external encoder returned a non-finite value")]
    NonFinite,
}

// ---- demographics ----------------------------------------------------------

/// Age normalisation statistics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemographicStats {
    pub age_mean: f64,
    pub age_std: f64,
}

impl DemographicStats {
    pub fn from_ages(ages: &[f64]) -> Self {
        let n = ages.len().max(1) as f64;
        let mean = ages.iter().sum::<f64>() / n;
        let var = ages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        Self { age_mean: mean, age_std: var.sqrt() }
    }

    pub fn from_profiles(profiles: &[DemographicProfile]) -> Self {
        let ages: Vec<f64> = profiles.iter().map(|p| p.age as f64).collect();
        Self::from_ages(&ages)
    }

    /// z-score; zero when the standard deviation is zero.
    pub fn z(&self, age: f64) -> f64 {
        if self.age_std > 0.0 {
            (age - self.age_mean) / self.age_std
        } else {
            0.0
        }
    }
}

/// Rows are users; columns are `[z(age) | gender | occupation | location]`.
pub fn preprocess_demographics(
    profiles: &[DemographicProfile],
    vocab: &Vocabularies,
    stats: &DemographicStats,
) -> Array2<f64> {
    let (g, o) = (vocab.genders.len(), vocab.occupations.len());
    let mut out = Array2::zeros((profiles.len(), vocab.demographic_width()));
    for (row, p) in profiles.iter().enumerate() {
        out[[row, 0]] = stats.z(p.age as f64);
        out[[row, 1 + p.gender]] = 1.0;
        out[[row, 1 + g + p.occupation]] = 1.0;
        out[[row, 1 + g + o + p.location]] = 1.0;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GnnLayer {
    #[serde(with = "crate::numeric::mat")]
    pub w_self: Array2<f64>,
    #[serde(with = "crate::numeric::mat")]
    pub w_neighbor: Array2<f64>,
    #[serde(with = "crate::numeric::vector")]
    pub bias: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GnnParams {
    pub layers: Vec<GnnLayer>,
    pub activation: Activation,
}

impl GnnParams {
    /// Seeded Glorot initialisation for `depth` layers mapping `input` to `width`.
    pub fn init(input: usize, width: usize, depth: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = (0..depth)
            .map(|l| {
                let fan_in = if l == 0 { input } else { width };
                GnnLayer {
                    w_self: xavier(width, fan_in, &mut rng),
                    w_neighbor: xavier(width, fan_in, &mut rng),
                    bias: Array1::zeros(width),
                }
            })
            .collect();
        Self { layers, activation: Activation::Tanh }
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.bias.len())
    }
}

/// Mean-neighbour message passing: `h <- act(W_self h_i + W_nbr mean_{j in N(i)} h_j + b)`.
/// An isolated node aggregates a zero vector.
pub fn embed_demographics(
    adjacency: &Adjacency,
    features: &Array2<f64>,
    params: &GnnParams,
) -> Result<Array2<f64>, EmbedError> {
    let n = adjacency.len();
    if features.nrows() != n {
        return Err(EmbedError::RowMismatch { rows: features.nrows(), nodes: n });
    }
    let mut h = features.clone();
    for (layer_idx, layer) in params.layers.iter().enumerate() {
        if layer.w_self.ncols() != h.ncols() || layer.w_neighbor.ncols() != h.ncols() {
            return Err(EmbedError::WidthMismatch {
                layer: layer_idx,
                expected: layer.w_self.ncols(),
                actual: h.ncols(),
            });
        }
        let mut agg = Array2::<f64>::zeros(h.raw_dim());
        for i in 0..n {
            let nbrs: Vec<usize> = adjacency.neighbors(i).collect();
            if nbrs.is_empty() {
                continue;
            }
            let mut row = agg.row_mut(i);
            for &j in &nbrs {
                row += &h.row(j);
            }
            row /= nbrs.len() as f64;
        }
        let mut next = h.dot(&layer.w_self.t()) + agg.dot(&layer.w_neighbor.t());
        next += &layer.bias;
        next.mapv_inplace(|x| params.activation.apply(x));
        h = next;
    }
    Ok(h)
}

// ---- posts -------------------------------------------------------------------

/// Lower-cases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str, remove_stop_words: bool) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .filter(|t| !(remove_stop_words && STOP_WORDS.contains(&t.as_str())))
        .collect()
}

/// Signed feature hashing into `dim` buckets followed by L2 normalisation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HashingTextEncoder {
    pub dim: usize,
    pub remove_stop_words: bool,
}

impl HashingTextEncoder {
    pub fn new(dim: usize) -> Self {
        Self { dim, remove_stop_words: true }
    }

    /// Embeds the token bag of all `texts` together. No tokens gives the zero vector.
    pub fn embed<'a>(&self, texts: impl IntoIterator<Item = &'a str>) -> Array1<f64> {
        let mut v = Array1::zeros(self.dim);
        for text in texts {
            for token in tokenize(text, self.remove_stop_words) {
                let mut hasher = FnvHasher::default();
                hasher.write(token.as_bytes());
                let h = hasher.finish();
                let bucket = (h % self.dim as u64) as usize;
                v[bucket] += if h >> 63 == 0 { 1.0 } else { -1.0 };
            }
        }
        l2_normalize(v)
    }
}

fn l2_normalize(mut v: Array1<f64>) -> Array1<f64> {
    let norm = v.dot(&v).sqrt();
    if norm > 0.0 {
        v /= norm;
    }
    v
}

pub fn embed_posts(posts: &[Post], encoder: &HashingTextEncoder) -> Array1<f64> {
    encoder.embed(posts.iter().map(|p| p.text.as_str()))
}

// ---- engagement --------------------------------------------------------------

/// `"<category>: <r> reactions, <c> comments, <s> shares"` clauses in vocabulary order,
/// joined by `"; "`; `"no engagement"` when every count is zero.
pub fn summarize_engagement(rec: &EngagementRecord, categories: &[String]) -> String {
    let clauses: Vec<String> = (0..CATEGORY_COUNT)
        .filter(|&c| rec.category_total(c) > 0)
        .map(|c| {
            let [r, cm, s] = rec.counts[c];
            format!("{}: {r} {}, {cm} {}, {s} {}", categories[c], ENGAGEMENT_KINDS[0], ENGAGEMENT_KINDS[1], ENGAGEMENT_KINDS[2])
        })
        .collect();
    if clauses.is_empty() {
        "no engagement".to_string()
    } else {
        clauses.join("; ")
    }
}

/// Per-feature min/max of the 8x3 count block over the fitting window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngagementBounds {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl EngagementBounds {
    pub fn fit<'a>(records: impl IntoIterator<Item = &'a EngagementRecord>) -> Self {
        let mut min = vec![f64::INFINITY; ENGAGEMENT_BLOCK];
        let mut max = vec![f64::NEG_INFINITY; ENGAGEMENT_BLOCK];
        let mut any = false;
        for rec in records {
            any = true;
            for (k, v) in flatten_counts(rec).into_iter().enumerate() {
                min[k] = min[k].min(v);
                max[k] = max[k].max(v);
            }
        }
        if !any {
            return Self { min: vec![0.0; ENGAGEMENT_BLOCK], max: vec![0.0; ENGAGEMENT_BLOCK] };
        }
        Self { min, max }
    }

    /// `(x - min) / (max - min)`, or 0 for a constant feature. Not clipped.
    pub fn scale(&self, rec: &EngagementRecord) -> Array1<f64> {
        Array1::from_iter(flatten_counts(rec).into_iter().enumerate().map(|(k, x)| {
            let span = self.max[k] - self.min[k];
            if span > 0.0 {
                (x - self.min[k]) / span
            } else {
                0.0
            }
        }))
    }
}

fn flatten_counts(rec: &EngagementRecord) -> Vec<f64> {
    rec.counts.iter().flat_map(|c| c.iter().map(|&v| v as f64)).collect()
}

/// `[scaled counts (24) ; hashed summary text (text.dim)]`.
pub fn embed_engagement(
    rec: &EngagementRecord,
    bounds: &EngagementBounds,
    categories: &[String],
    text: &HashingTextEncoder,
) -> Array1<f64> {
    let scaled = bounds.scale(rec);
    let summary = summarize_engagement(rec, categories);
    let hashed = text.embed([summary.as_str()]);
    ndarray::concatenate![ndarray::Axis(0), scaled, hashed]
}

// ---- external encoder --------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalEncoderConfig {
    pub url: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

fn default_timeout_ms() -> u64 {
    10_000
}

#[derive(Serialize)]
struct EncodeRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EncodeResponse {
    vectors: Vec<Vec<f64>>,
}

/// `POST {texts:[...]}` -> `{vectors:[[...]]}`. The batch either fully succeeds or errors.
pub fn external_encode(
    texts: &[String],
    dim: usize,
    config: &ExternalEncoderConfig,
) -> Result<Vec<Array1<f64>>, ExternalEncodeError> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
        .build()
        .into();
    let mut response = agent
        .post(&config.url)
        .send_json(&EncodeRequest { texts })
        .map_err(|e| ExternalEncodeError::Transport(e.to_string()))?;
    let body: EncodeResponse = response
        .body_mut()
        .read_json()
        .map_err(|e| ExternalEncodeError::Transport(e.to_string()))?;
    let width = body.vectors.iter().map(Vec::len).find(|&w| w != dim).unwrap_or(dim);
    if body.vectors.len() != texts.len() || width != dim {
        return Err(ExternalEncodeError::DimensionMismatch {
            expected_count: texts.len(),
            expected_width: dim,
            actual: body.vectors.len(),
            width,
        });
    }
    if body.vectors.iter().flatten().any(|v| !v.is_finite()) {
        return Err(ExternalEncodeError::NonFinite);
    }
    Ok(body.vectors.into_iter().map(Array1::from).collect())
}

// ---- assembled encoder -------------------------------------------------------

/// Raw (pre-projection) modality vectors for one user at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct RawModalities {
    pub demographic: Array1<f64>,
    pub posts: Array1<f64>,
    pub engagement: Array1<f64>,
}

impl RawModalities {
    pub fn views(&self) -> [ArrayView1<'_, f64>; 3] {
        [self.demographic.view(), self.posts.view(), self.engagement.view()]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Output width of the GNN and of the hashed text embeddings.
    pub width: usize,
    pub gnn_layers: usize,
    pub remove_stop_words: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { width: 32, gnn_layers: 2, remove_stop_words: true }
    }
}

/// Frozen encoders plus the statistics fitted on conditioning steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub demographic_stats: DemographicStats,
    pub engagement_bounds: EngagementBounds,
    pub gnn: GnnParams,
    pub text: HashingTextEncoder,
    #[serde(skip)]
    pub external: Option<ExternalEncoderConfig>,
}

impl Encoder {
    /// Fit statistics on `conditioning`; the GNN weights are drawn from `seed`.
    pub fn fit(conditioning: &TemporalDataset, config: &EncoderConfig, seed: u64) -> Self {
        let width = conditioning.vocabularies.demographic_width();
        Self {
            demographic_stats: DemographicStats::from_profiles(&conditioning.profiles),
            engagement_bounds: EngagementBounds::fit(
                conditioning.snapshots.iter().flat_map(|s| s.engagement.iter()),
            ),
            gnn: GnnParams::init(width, config.width, config.gnn_layers, seed),
            text: HashingTextEncoder { dim: config.width, remove_stop_words: config.remove_stop_words },
            external: None,
        }
    }

    pub fn raw_dims(&self) -> [usize; 3] {
        [self.gnn.output_width(), self.text.dim, ENGAGEMENT_BLOCK + self.text.dim]
    }

    /// Raw modalities for every user of one snapshot.
    pub fn encode(
        &self,
        profiles: &[DemographicProfile],
        vocab: &Vocabularies,
        snapshot: &Snapshot,
    ) -> Result<Vec<RawModalities>, EmbedError> {
        let features = preprocess_demographics(profiles, vocab, &self.demographic_stats);
        let demo = embed_demographics(&snapshot.adjacency, &features, &self.gnn)?;
        let posts = match &self.external {
            None => snapshot.posts.iter().map(|p| embed_posts(p, &self.text)).collect(),
            Some(cfg) => {
                let texts: Vec<String> = snapshot
                    .posts
                    .iter()
                    .map(|ps| ps.iter().map(|p| p.text.as_str()).collect::<Vec<_>>().join("\n"))
                    .collect();
                external_encode(&texts, self.text.dim, cfg)?
            }
        };
        Ok(posts
            .into_iter()
            .enumerate()
            .map(|(u, p)| RawModalities {
                demographic: demo.row(u).to_owned(),
                posts: p,
                engagement: embed_engagement(
                    &snapshot.engagement[u],
                    &self.engagement_bounds,
                    &vocab.categories,
                    &self.text,
                ),
            })
            .collect())
    }
}
