//! Predictor head, link and activity heads, candidate ranking and multi-stage rollout.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{EmbedError, RawModalities};
use crate::fusion::{add_outer, FusedEmbedding};
use crate::graphgen::{
    category_keywords, Adjacency, EngagementRecord, Post, Snapshot, TemporalDataset, CATEGORY_COUNT,
};
use crate::model::EvolutionModel;
use crate::numeric::{sigmoid, uniform_vec, xavier};

/// Edge decision threshold: `p > 0.5` is an edge, `p <= 0.5` is not.
pub const EDGE_THRESHOLD: f64 = 0.5;
pub const MAX_HORIZON: usize = 4;
pub const FORECAST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PredictError {
    #[error("predictor expects fused width {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("horizon must be in 1..={MAX_HORIZON}, got {0}")]
    BadHorizon(usize),
    #[error("unknown user id {0}")]
    UnknownUser(usize),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("conditioning data has no snapshots")]
    EmptyConditioning,
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorParams {
    #[serde(with = "crate::numeric::mat")]
    pub w_hidden: Array2<f64>,
    #[serde(with = "crate::numeric::vector")]
    pub b_hidden: Array1<f64>,
    #[serde(with = "crate::numeric::mat")]
    pub w_out: Array2<f64>,
    #[serde(with = "crate::numeric::vector")]
    pub b_out: Array1<f64>,
    /// Weights on `[y_i ; y_j]`.
    #[serde(with = "crate::numeric::vector")]
    pub w_link: Array1<f64>,
    /// Weights on the element-wise product `y_i * y_j`.
    #[serde(with = "crate::numeric::vector")]
    pub w_pair: Array1<f64>,
    #[serde(with = "crate::numeric::vector")]
    pub b_link: Array1<f64>,
    #[serde(with = "crate::numeric::mat")]
    pub w_activity: Array2<f64>,
    #[serde(with = "crate::numeric::vector")]
    pub b_activity: Array1<f64>,
}

impl PredictorParams {
    pub fn init<R: Rng + ?Sized>(fused: usize, hidden: usize, out: usize, rng: &mut R) -> Self {
        Self {
            w_hidden: xavier(hidden, fused, rng),
            b_hidden: Array1::zeros(hidden),
            w_out: xavier(out, hidden, rng),
            b_out: Array1::zeros(out),
            w_link: uniform_vec(2 * out, (3.0 / out as f64).sqrt(), rng),
            w_pair: uniform_vec(out, (3.0 / out as f64).sqrt(), rng),
            b_link: Array1::zeros(1),
            w_activity: xavier(CATEGORY_COUNT, out, rng),
            b_activity: Array1::zeros(CATEGORY_COUNT),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w_hidden: Array2::zeros(self.w_hidden.raw_dim()),
            b_hidden: Array1::zeros(self.b_hidden.len()),
            w_out: Array2::zeros(self.w_out.raw_dim()),
            b_out: Array1::zeros(self.b_out.len()),
            w_link: Array1::zeros(self.w_link.len()),
            w_pair: Array1::zeros(self.w_pair.len()),
            b_link: Array1::zeros(1),
            w_activity: Array2::zeros(self.w_activity.raw_dim()),
            b_activity: Array1::zeros(self.b_activity.len()),
        }
    }

    pub fn fused_width(&self) -> usize {
        self.w_hidden.ncols()
    }

    pub fn output_width(&self) -> usize {
        self.w_out.nrows()
    }
}

/// Intermediate values kept for the backward pass.
#[derive(Clone, Debug)]
pub struct PredictorCache {
    pub input: Array1<f64>,
    pub hidden: Array1<f64>,
    pub y: Array1<f64>,
}

/// `y = W_out tanh(W_h f + b_h) + b_out`.
pub fn predictor_forward(f: &Array1<f64>, params: &PredictorParams) -> Result<Array1<f64>, PredictError> {
    predictor_forward_cached(f, params).map(|c| c.y)
}

pub fn predictor_forward_cached(f: &Array1<f64>, params: &PredictorParams) -> Result<PredictorCache, PredictError> {
    if f.len() != params.fused_width() {
        return Err(PredictError::DimensionMismatch { expected: params.fused_width(), actual: f.len() });
    }
    let hidden = (params.w_hidden.dot(f) + &params.b_hidden).mapv(f64::tanh);
    let y = params.w_out.dot(&hidden) + &params.b_out;
    Ok(PredictorCache { input: f.clone(), hidden, y })
}

/// Accumulates parameter gradients and returns `dL/df`.
pub fn predictor_backward(
    cache: &PredictorCache,
    d_y: &Array1<f64>,
    params: &PredictorParams,
    grads: &mut PredictorParams,
) -> Array1<f64> {
    add_outer(&mut grads.w_out, &d_y.view(), &cache.hidden.view());
    grads.b_out += d_y;
    let d_hidden = params.w_out.t().dot(d_y);
    let d_pre = &d_hidden * &cache.hidden.mapv(|h| 1.0 - h * h);
    add_outer(&mut grads.w_hidden, &d_pre.view(), &cache.input.view());
    grads.b_hidden += &d_pre;
    params.w_hidden.t().dot(&d_pre)
}

/// Orders a pair canonically (`i < j`) unless the graph is directed.
pub fn canonical_pair(i: usize, j: usize, directed: bool) -> (usize, usize) {
    if directed || i <= j {
        (i, j)
    } else {
        (j, i)
    }
}

/// Logit of the link head for an already-ordered pair.
pub fn link_logit(y_i: ArrayView1<f64>, y_j: ArrayView1<f64>, params: &PredictorParams) -> f64 {
    let k = y_i.len();
    let w = &params.w_link;
    w.slice(ndarray::s![..k]).dot(&y_i)
        + w.slice(ndarray::s![k..]).dot(&y_j)
        + (&y_i * &y_j).dot(&params.w_pair)
        + params.b_link[0]
}

/// Edge probability for users `i` and `j` with outputs `y_i`, `y_j`. Undirected pairs are
/// canonicalised first, so `p(i, j) == p(j, i)` bit for bit.
pub fn link_probability(
    (i, y_i): (usize, ArrayView1<f64>),
    (j, y_j): (usize, ArrayView1<f64>),
    directed: bool,
    params: &PredictorParams,
) -> f64 {
    let (a, b) = if directed || i <= j { (y_i, y_j) } else { (y_j, y_i) };
    sigmoid(link_logit(a, b, params))
}

/// Backward of [`link_logit`]; returns gradients for the (ordered) pair.
pub fn link_backward(
    y_i: ArrayView1<f64>,
    y_j: ArrayView1<f64>,
    d_logit: f64,
    params: &PredictorParams,
    grads: &mut PredictorParams,
) -> (Array1<f64>, Array1<f64>) {
    let k = y_i.len();
    {
        let mut gw = grads.w_link.slice_mut(ndarray::s![..k]);
        gw.scaled_add(d_logit, &y_i);
    }
    {
        let mut gw = grads.w_link.slice_mut(ndarray::s![k..]);
        gw.scaled_add(d_logit, &y_j);
    }
    grads.w_pair.scaled_add(d_logit, &(&y_i * &y_j));
    grads.b_link[0] += d_logit;
    let w_i = params.w_link.slice(ndarray::s![..k]);
    let w_j = params.w_link.slice(ndarray::s![k..]);
    let d_i = (&w_i + &(&params.w_pair * &y_j)) * d_logit;
    let d_j = (&w_j + &(&params.w_pair * &y_i)) * d_logit;
    (d_i, d_j)
}

/// `true` (edge) iff `p > threshold`.
pub fn classify_edge(p: f64, threshold: f64) -> bool {
    p > threshold
}

pub fn activity_logits(y: &Array1<f64>, params: &PredictorParams) -> Array1<f64> {
    params.w_activity.dot(y) + &params.b_activity
}

/// Independent per-category sigmoids; the result is not a distribution.
pub fn activity_probabilities(y: &Array1<f64>, params: &PredictorParams) -> [f64; CATEGORY_COUNT] {
    let z = activity_logits(y, params);
    let mut out = [0.0; CATEGORY_COUNT];
    for (o, v) in out.iter_mut().zip(z.iter()) {
        *o = sigmoid(*v);
    }
    out
}

/// Top-`k` users by edge probability for `user`, descending, ties to the lower id.
/// With `existing`, current neighbours are excluded.
pub fn rank_candidates(
    user: usize,
    edge_probs: &Array2<f64>,
    existing: Option<&Adjacency>,
    k: usize,
) -> Result<Vec<usize>, PredictError> {
    let n = edge_probs.nrows();
    if user >= n {
        return Err(PredictError::UnknownUser(user));
    }
    if k == 0 {
        return Err(PredictError::ZeroK);
    }
    let mut candidates: Vec<usize> = (0..n)
        .filter(|&j| j != user && existing.is_none_or(|a| !a.has_edge(user, j)))
        .collect();
    candidates.sort_by(|&a, &b| {
        edge_probs[[user, b]]
            .partial_cmp(&edge_probs[[user, a]])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    candidates.truncate(k);
    Ok(candidates)
}

/// Model outputs for every user at one step.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub fused: Vec<FusedEmbedding>,
    pub ys: Vec<Array1<f64>>,
    pub edge_probs: Array2<f64>,
    pub activity_probs: Array2<f64>,
}

impl StepOutput {
    pub fn fused_vectors(&self) -> Vec<Array1<f64>> {
        self.fused.iter().map(|f| f.f.clone()).collect()
    }
}

/// Edge probabilities for every pair; exactly symmetric when undirected, zero diagonal.
pub fn edge_probability_matrix(ys: &[Array1<f64>], directed: bool, params: &PredictorParams) -> Array2<f64> {
    let n = ys.len();
    let mut probs = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            if i == j || (!directed && j < i) {
                continue;
            }
            let p = link_probability((i, ys[i].view()), (j, ys[j].view()), directed, params);
            probs[[i, j]] = p;
            if !directed {
                probs[[j, i]] = p;
            }
        }
    }
    probs
}

#[derive(Clone, Debug)]
pub struct StageForecast {
    pub stage: usize,
    pub edge_probs: Array2<f64>,
    pub predicted_edges: Adjacency,
    pub activity_probs: Array2<f64>,
    pub fused: Vec<Array1<f64>>,
}

#[derive(Clone, Debug)]
pub struct EvolutionForecast {
    pub stages: Vec<StageForecast>,
}

/// Historical rates used to turn predicted activity back into model inputs.
#[derive(Clone, Debug)]
struct FeedbackRates {
    volume: Vec<f64>,
    per_post: Vec<[f64; 3]>,
}

impl FeedbackRates {
    fn from_history(ds: &TemporalDataset) -> Self {
        let n = ds.user_count();
        let steps = ds.step_count().max(1) as f64;
        let mut volume = vec![0.0; n];
        let mut per_post = vec![[0.0; 3]; n];
        for u in 0..n {
            let posts: usize = ds.snapshots.iter().map(|s| s.posts[u].len()).sum();
            volume[u] = posts as f64 / steps;
            if posts > 0 {
                for k in 0..3 {
                    let total: u64 = ds.snapshots.iter().map(|s| s.engagement[u].counts.iter().map(|c| c[k]).sum::<u64>()).sum();
                    per_post[u][k] = total as f64 / posts as f64;
                }
            }
        }
        Self { volume, per_post }
    }

    /// Expected per-category post counts from predicted probabilities.
    fn pseudo_counts(&self, user: usize, probs: ArrayView1<f64>) -> [f64; CATEGORY_COUNT] {
        let total: f64 = probs.sum();
        let mut out = [0.0; CATEGORY_COUNT];
        if total > 0.0 {
            for (c, o) in out.iter_mut().enumerate() {
                *o = probs[c] / total * self.volume[user];
            }
        }
        out
    }
}

fn synthetic_snapshot(
    step: usize,
    previous: &StageForecast,
    rates: &FeedbackRates,
) -> Snapshot {
    let n = previous.activity_probs.nrows();
    let mut posts = Vec::with_capacity(n);
    let mut engagement = Vec::with_capacity(n);
    for u in 0..n {
        let counts = rates.pseudo_counts(u, previous.activity_probs.row(u));
        let mut user_posts = Vec::new();
        let mut rec = EngagementRecord::default();
        for (c, &expected) in counts.iter().enumerate() {
            let k = expected.round() as usize;
            let text = category_keywords(c).join(" ");
            user_posts.extend((0..k).map(|_| Post { category: c, text: text.clone(), step }));
            for kind in 0..3 {
                rec.counts[c][kind] = (expected * rates.per_post[u][kind]).round() as u64;
            }
        }
        posts.push(user_posts);
        engagement.push(rec);
    }
    Snapshot { step, adjacency: previous.predicted_edges.clone(), posts, engagement }
}

impl StageForecast {
    fn from_output(stage: usize, out: StepOutput, directed: bool) -> Self {
        let n = out.ys.len();
        let mut predicted = Adjacency::empty(n, directed);
        for i in 0..n {
            for j in 0..n {
                if i != j && classify_edge(out.edge_probs[[i, j]], EDGE_THRESHOLD) {
                    predicted.insert(i, j);
                }
            }
        }
        let fused = out.fused_vectors();
        StageForecast {
            stage,
            edge_probs: out.edge_probs,
            predicted_edges: predicted,
            activity_probs: out.activity_probs,
            fused,
        }
    }
}

/// Autoregressive forecast of `horizon` stages after the last conditioning step.
///
/// Stage 1 reads the final conditioning snapshot. Every later stage is fed the previous
/// stage's predicted adjacency, pseudo posts and engagement built from its activity
/// probabilities, and its fused vectors as cross-modal context.
pub fn rollout(
    model: &EvolutionModel,
    conditioning: &TemporalDataset,
    horizon: usize,
) -> Result<EvolutionForecast, PredictError> {
    if !(1..=MAX_HORIZON).contains(&horizon) {
        return Err(PredictError::BadHorizon(horizon));
    }
    if conditioning.snapshots.is_empty() {
        return Err(PredictError::EmptyConditioning);
    }
    let raws: Vec<Vec<RawModalities>> = conditioning
        .snapshots
        .iter()
        .map(|s| model.encoder.encode(&conditioning.profiles, &conditioning.vocabularies, s))
        .collect::<Result<_, _>>()?;
    let mut context: Option<Vec<Array1<f64>>> = None;
    for raw in &raws[..raws.len() - 1] {
        context = Some(model.step(raw, context.as_deref())?.fused_vectors());
    }
    let rates = FeedbackRates::from_history(conditioning);
    let last_step = conditioning.last().step;

    let first = model.step(raws.last().expect("non-empty"), context.as_deref())?;
    let mut stages = vec![StageForecast::from_output(1, first, model.directed)];
    for stage in 2..=horizon {
        let prev = stages.last().expect("at least one stage");
        let snapshot = synthetic_snapshot(last_step + stage - 1, prev, &rates);
        let raw = model.encoder.encode(&conditioning.profiles, &conditioning.vocabularies, &snapshot)?;
        let out = model.step(&raw, Some(&prev.fused))?;
        stages.push(StageForecast::from_output(stage, out, model.directed));
    }
    Ok(EvolutionForecast { stages })
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct ForecastFile {
    pub schema_version: u32,
    pub stages: Vec<ForecastFileStage>,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct ForecastFileStage {
    pub stage: usize,
    /// `[i, j, p]` for every candidate pair.
    pub edges: Vec<(usize, usize, f64)>,
    pub activities: Vec<Vec<f64>>,
}

impl EvolutionForecast {
    /// On-disk form; probabilities rounded to six decimals.
    pub fn to_file(&self, directed: bool) -> ForecastFile {
        let stages = self
            .stages
            .iter()
            .map(|s| {
                let n = s.edge_probs.nrows();
                let edges = Adjacency::empty(n, directed)
                    .pairs()
                    .into_iter()
                    .map(|(i, j)| (i, j, round6(s.edge_probs[[i, j]])))
                    .collect();
                let activities = s.activity_probs.rows().into_iter().map(|r| r.iter().map(|&p| round6(p)).collect()).collect();
                ForecastFileStage { stage: s.stage, edges, activities }
            })
            .collect();
        ForecastFile { schema_version: FORECAST_SCHEMA_VERSION, stages }
    }
}
