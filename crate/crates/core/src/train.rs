//! Losses, the differentiable training objective, Adam and the training loop.

use ndarray::{Array1, Array2};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{EmbedError, Encoder, EncoderConfig, RawModalities};
use crate::fusion::{fuse, fuse_backward, FusedEmbedding, FusionParams, FusionStrategy, ModalityTriple};
use crate::graphgen::{Adjacency, TemporalDataset, CATEGORY_COUNT};
use crate::model::{EvolutionModel, ModelDims, ModelParams};
use crate::numeric::{clamp_prob, inside_clamp, sigmoid};
use crate::predict::{
    activity_logits, link_backward, link_logit, predictor_backward, predictor_forward_cached, PredictError,
    PredictorCache,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("need at least two conditioning steps to form a transition, got {0}")]
    TooFewSteps(usize),
    #[error("no labelled pairs to train on")]
    EmptyPairs,
    #[error("pair ({0}, {1}) is out of range")]
    PairOutOfRange(usize, usize),
    #[error("loss became non-finite at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Predict(#[from] PredictError),
}

/// How the activity head is scored against its targets.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivityObjective {
    /// `-sum_c [t log P + (1 - t) log(1 - P)]`.
    #[default]
    Binary,
    /// `-sum_c t log P` only.
    PositiveOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub link: f64,
    pub activity: f64,
}

impl LossWeights {
    pub fn new(link: f64, activity: f64) -> Self {
        Self { link, activity }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub strategy: FusionStrategy,
    pub epochs: usize,
    pub learning_rate: f64,
    pub lambda_link: f64,
    pub lambda_activity: f64,
    pub dim: usize,
    pub seed: u64,
    pub activity_objective: ActivityObjective,
    pub weight_decay: f64,
    pub negative_ratio: usize,
    pub encoder: EncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: FusionStrategy::CrossModal,
            epochs: 200,
            learning_rate: 1e-2,
            lambda_link: 0.5,
            lambda_activity: 0.5,
            dim: 16,
            seed: 0,
            activity_objective: ActivityObjective::Binary,
            weight_decay: 0.3,
            negative_ratio: 3,
            encoder: EncoderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights::new(self.lambda_link, self.lambda_activity)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.lambda_link >= 0.0 && self.lambda_activity >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if self.lambda_link == 0.0 && self.lambda_activity == 0.0 {
            return bad("at least one loss weight must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight decay must be non-negative");
        }
        if self.negative_ratio == 0 {
            return bad("negative ratio must be at least 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.dim == 0 || self.encoder.width == 0 {
            return bad("dimensions must be positive");
        }
        Ok(())
    }
}

// ---- loss elements -----------------------------------------------------------

/// Binary cross-entropy of one probability against a 0/1 label, with clamping.
pub fn bce(p: f64, label: f64) -> f64 {
    let p = clamp_prob(p);
    -(label * p.ln() + (1.0 - label) * (1.0 - p).ln())
}

/// `x_c / max_c x_c`, or `None` when the user has no posts.
pub fn activity_targets(counts: &[f64]) -> Option<Vec<f64>> {
    let max = counts.iter().copied().fold(0.0, f64::max);
    (max > 0.0).then(|| counts.iter().map(|x| x / max).collect())
}

fn activity_term(probs: &[f64], targets: &[f64], objective: ActivityObjective) -> f64 {
    probs
        .iter()
        .zip(targets)
        .map(|(&p, &t)| {
            let p = clamp_prob(p);
            let pos = -t * p.ln();
            match objective {
                ActivityObjective::PositiveOnly => pos,
                ActivityObjective::Binary => pos - (1.0 - t) * (1.0 - p).ln(),
            }
        })
        .sum()
}

/// Derivative of one activity term with respect to the logit.
fn activity_term_grad(p: f64, t: f64, objective: ActivityObjective) -> f64 {
    if !inside_clamp(p) {
        return 0.0;
    }
    match objective {
        ActivityObjective::PositiveOnly => -t * (1.0 - p),
        ActivityObjective::Binary => p - t,
    }
}

fn bce_grad(p: f64, label: f64) -> f64 {
    if inside_clamp(p) {
        p - label
    } else {
        0.0
    }
}

/// Mean binary cross-entropy over `pairs`, labelled by `adjacency`.
pub fn link_loss(edge_probs: &Array2<f64>, adjacency: &Adjacency, pairs: &[(usize, usize)]) -> Result<f64, TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyPairs);
    }
    let n = adjacency.len();
    let mut total = 0.0;
    for &(i, j) in pairs {
        if i >= n || j >= n || i >= edge_probs.nrows() || j >= edge_probs.ncols() {
            return Err(TrainError::PairOutOfRange(i, j));
        }
        let label = if adjacency.has_edge(i, j) { 1.0 } else { 0.0 };
        total += bce(edge_probs[[i, j]], label);
    }
    Ok(total / pairs.len() as f64)
}

/// `-(1/|U|) sum_u sum_c t_uc log P_uc` with `t = x / max x`; users without posts are
/// skipped and an instance with no eligible user scores 0.
pub fn activity_loss(probs: &Array2<f64>, counts: &Array2<f64>) -> f64 {
    activity_loss_with(probs, counts, ActivityObjective::PositiveOnly)
}

pub fn activity_loss_with(probs: &Array2<f64>, counts: &Array2<f64>, objective: ActivityObjective) -> f64 {
    let mut total = 0.0;
    let mut included = 0usize;
    for (p, x) in probs.rows().into_iter().zip(counts.rows()) {
        if let Some(t) = activity_targets(&x.to_vec()) {
            total += activity_term(&p.to_vec(), &t, objective);
            included += 1;
        }
    }
    if included == 0 {
        0.0
    } else {
        total / included as f64
    }
}

pub fn total_loss(link: f64, activity: f64, weights: LossWeights) -> f64 {
    weights.link * link + weights.activity * activity
}

// ---- training data -------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabeledPair {
    pub i: usize,
    pub j: usize,
    pub label: f64,
}

/// Inputs at step `t` with link and activity labels from step `t + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub inputs: Vec<RawModalities>,
    pub pairs: Vec<LabeledPair>,
    pub counts: Vec<[f64; CATEGORY_COUNT]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSequence {
    pub directed: bool,
    pub transitions: Vec<Transition>,
}

/// Up to `count` non-edges of `adjacency`, drawn without replacement and returned sorted.
pub fn sample_negatives(adjacency: &Adjacency, count: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let pool: Vec<(usize, usize)> = adjacency.pairs().into_iter().filter(|&(i, j)| !adjacency.has_edge(i, j)).collect();
    let mut out: Vec<(usize, usize)> = pool.choose_multiple(rng, count.min(pool.len())).copied().collect();
    out.sort_unstable();
    out
}

/// Positives of the next step plus an equal number of seeded negatives per transition.
pub fn build_sequence(
    encoder: &Encoder,
    ds: &TemporalDataset,
    negative_ratio: usize,
    seed: u64,
) -> Result<TrainingSequence, TrainError> {
    if ds.step_count() < 2 {
        return Err(TrainError::TooFewSteps(ds.step_count()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    let mut transitions = Vec::with_capacity(ds.step_count() - 1);
    for w in ds.snapshots.windows(2) {
        let inputs = encoder.encode(&ds.profiles, &ds.vocabularies, &w[0])?;
        let next = &w[1].adjacency;
        let positives = next.edges();
        let negatives = sample_negatives(next, positives.len() * negative_ratio, &mut rng);
        let pairs = positives
            .iter()
            .map(|&(i, j)| LabeledPair { i, j, label: 1.0 })
            .chain(negatives.iter().map(|&(i, j)| LabeledPair { i, j, label: 0.0 }))
            .collect();
        let counts = (0..ds.user_count()).map(|u| w[1].category_counts(u)).collect();
        transitions.push(Transition { inputs, pairs, counts });
    }
    Ok(TrainingSequence { directed: ds.directed, transitions })
}

// ---- objective -------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub link: f64,
    pub activity: f64,
    pub total: f64,
}

struct StepCache {
    triples: Vec<ModalityTriple>,
    fused: Vec<FusedEmbedding>,
    preds: Vec<PredictorCache>,
    activity: Vec<Array1<f64>>,
    link_probs: Vec<f64>,
}

fn forward(params: &ModelParams, seq: &TrainingSequence) -> Result<Vec<StepCache>, TrainError> {
    let mut caches: Vec<StepCache> = Vec::with_capacity(seq.transitions.len());
    for tr in &seq.transitions {
        let prev = caches.last();
        let n = tr.inputs.len();
        let mut cache = StepCache {
            triples: Vec::with_capacity(n),
            fused: Vec::with_capacity(n),
            preds: Vec::with_capacity(n),
            activity: Vec::with_capacity(n),
            link_probs: Vec::with_capacity(tr.pairs.len()),
        };
        for (u, raw) in tr.inputs.iter().enumerate() {
            let triple = params.fusion.project(raw);
            let f = fuse(&triple, prev.map(|c| &c.fused[u].f), &params.fusion);
            let pc = predictor_forward_cached(&f.f, &params.predictor)?;
            cache.activity.push(activity_logits(&pc.y, &params.predictor).mapv(sigmoid));
            cache.triples.push(triple);
            cache.fused.push(f);
            cache.preds.push(pc);
        }
        for pair in &tr.pairs {
            let (a, b) = (&cache.preds[pair.i].y, &cache.preds[pair.j].y);
            cache.link_probs.push(sigmoid(link_logit(a.view(), b.view(), &params.predictor)));
        }
        caches.push(cache);
    }
    Ok(caches)
}

fn loss_from(caches: &[StepCache], seq: &TrainingSequence, weights: LossWeights, objective: ActivityObjective) -> (LossBreakdown, usize, usize) {
    let mut link = 0.0;
    let mut pairs = 0usize;
    let mut act = 0.0;
    let mut users = 0usize;
    for (cache, tr) in caches.iter().zip(&seq.transitions) {
        for (p, pair) in cache.link_probs.iter().zip(&tr.pairs) {
            link += bce(*p, pair.label);
            pairs += 1;
        }
        for (probs, counts) in cache.activity.iter().zip(&tr.counts) {
            if let Some(t) = activity_targets(counts) {
                act += activity_term(probs.as_slice().expect("contiguous"), &t, objective);
                users += 1;
            }
        }
    }
    let link = if pairs > 0 { link / pairs as f64 } else { 0.0 };
    let activity = if users > 0 { act / users as f64 } else { 0.0 };
    (LossBreakdown { link, activity, total: total_loss(link, activity, weights) }, pairs, users)
}

/// Training loss of `params` on `seq`.
pub fn objective(
    params: &ModelParams,
    seq: &TrainingSequence,
    weights: LossWeights,
    activity: ActivityObjective,
) -> Result<LossBreakdown, TrainError> {
    let caches = forward(params, seq)?;
    Ok(loss_from(&caches, seq, weights, activity).0)
}

/// Loss and its exact gradient, back-propagated through the fused-vector chain across steps.
pub fn objective_and_gradient(
    params: &ModelParams,
    seq: &TrainingSequence,
    weights: LossWeights,
    activity: ActivityObjective,
) -> Result<(LossBreakdown, ModelParams), TrainError> {
    let caches = forward(params, seq)?;
    let (loss, pairs, users) = loss_from(&caches, seq, weights, activity);
    let mut grads = params.zeros_like();
    let link_scale = if pairs > 0 { weights.link / pairs as f64 } else { 0.0 };
    let act_scale = if users > 0 { weights.activity / users as f64 } else { 0.0 };
    let width = params.predictor.output_width();

    let mut carry: Option<Vec<Array1<f64>>> = None;
    for (t, (cache, tr)) in caches.iter().zip(&seq.transitions).enumerate().rev() {
        let n = tr.inputs.len();
        let mut d_y = vec![Array1::<f64>::zeros(width); n];
        for (u, (probs, counts)) in cache.activity.iter().zip(&tr.counts).enumerate() {
            let Some(targets) = activity_targets(counts) else { continue };
            let dz: Array1<f64> =
                probs.iter().zip(&targets).map(|(&p, &tg)| act_scale * activity_term_grad(p, tg, activity)).collect();
            crate::fusion::add_outer(&mut grads.predictor.w_activity, &dz.view(), &cache.preds[u].y.view());
            grads.predictor.b_activity += &dz;
            d_y[u] += &params.predictor.w_activity.t().dot(&dz);
        }
        for (p, pair) in cache.link_probs.iter().zip(&tr.pairs) {
            let dz = link_scale * bce_grad(*p, pair.label);
            if dz == 0.0 {
                continue;
            }
            let (di, dj) = link_backward(
                cache.preds[pair.i].y.view(),
                cache.preds[pair.j].y.view(),
                dz,
                &params.predictor,
                &mut grads.predictor,
            );
            d_y[pair.i] += &di;
            d_y[pair.j] += &dj;
        }
        let prev = t.checked_sub(1).map(|p| &caches[p]);
        let chained = prev.is_some() && params.strategy() == FusionStrategy::CrossModal;
        let mut next_carry = chained.then(|| vec![Array1::<f64>::zeros(params.fusion.dim()); n]);
        for u in 0..n {
            let mut d_f = predictor_backward(&cache.preds[u], &d_y[u], &params.predictor, &mut grads.predictor);
            if let Some(c) = &carry {
                d_f += &c[u];
            }
            let f_prev = prev.map(|p| &p.fused[u].f);
            let (d_triple, d_prev) = fuse_backward(
                &cache.triples[u],
                f_prev,
                &params.fusion,
                &cache.fused[u],
                &d_f,
                &mut grads.fusion,
            );
            FusionParams::project_backward(&tr.inputs[u], &d_triple, &mut grads.fusion);
            if let (Some(nc), Some(dp)) = (next_carry.as_mut(), d_prev) {
                nc[u] += &dp;
            }
        }
        carry = next_carry;
    }
    Ok((loss, grads))
}

// ---- optimiser -------------------------------------------------------------------

/// Adam with optional decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay applied as `p -= lr * weight_decay * p`.
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(params: &ModelParams, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.blocks().iter().map(|(_, b)| vec![0.0; b.len()]).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, ((_, p), (_, g))) in params.blocks_mut().into_iter().zip(grads.blocks()).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= self.lr * ((m[i] / c1) / ((v[i] / c2).sqrt() + self.eps) + self.weight_decay * p[i]);
            }
        }
    }
}

// ---- training loop ---------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: EvolutionModel,
    /// Loss before each update, one entry per epoch.
    pub losses: Vec<LossBreakdown>,
}

/// Fits the encoder on `conditioning` and trains with [`train_with_encoder`].
pub fn train(conditioning: &TemporalDataset, config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let encoder = Encoder::fit(conditioning, &config.encoder, config.seed);
    train_with_encoder(encoder, conditioning, config)
}

pub fn train_with_encoder(
    encoder: Encoder,
    conditioning: &TemporalDataset,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let seq = build_sequence(&encoder, conditioning, config.negative_ratio, config.seed)?;
    let dims = ModelDims::new(encoder.raw_dims(), config.dim);
    let mut params = ModelParams::init(config.strategy, dims, config.seed.wrapping_add(1));
    let mut adam = Adam::new(&params, config.learning_rate);
    adam.weight_decay = config.weight_decay;
    let weights = config.weights();
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let (loss, grads) = objective_and_gradient(&params, &seq, weights, config.activity_objective)?;
        if !loss.total.is_finite() {
            return Err(TrainError::Diverged { epoch });
        }
        losses.push(loss);
        adam.step(&mut params, &grads);
        if !params.is_finite() {
            return Err(TrainError::Diverged { epoch });
        }
    }
    Ok(TrainOutcome { model: EvolutionModel { directed: conditioning.directed, encoder, params }, losses })
}

// ---- gradient check --------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct GradientCheckReport {
    /// Largest relative error per parameter block.
    pub blocks: Vec<(&'static str, f64)>,
    pub max_relative_error: f64,
    pub passed: bool,
}

/// Step used for central differences.
pub const GRADIENT_CHECK_STEP: f64 = 1e-5;
/// Denominator floor so that entries with vanishing gradient compare absolutely.
pub const GRADIENT_CHECK_FLOOR: f64 = 1e-6;

/// Compares the analytic gradient with central differences on every parameter.
pub fn gradient_check(
    params: &ModelParams,
    seq: &TrainingSequence,
    weights: LossWeights,
    activity: ActivityObjective,
    tolerance: f64,
) -> Result<GradientCheckReport, TrainError> {
    let (_, analytic) = objective_and_gradient(params, seq, weights, activity)?;
    let mut probe = params.clone();
    let block_count = params.blocks().len();
    let mut blocks = Vec::with_capacity(block_count);
    for b in 0..block_count {
        let (name, grad) = analytic.blocks()[b];
        let grad = grad.to_vec();
        let mut worst: f64 = 0.0;
        for (i, &a) in grad.iter().enumerate() {
            let original = probe.blocks()[b].1[i];
            probe.blocks_mut()[b].1[i] = original + GRADIENT_CHECK_STEP;
            let up = objective(&probe, seq, weights, activity)?.total;
            probe.blocks_mut()[b].1[i] = original - GRADIENT_CHECK_STEP;
            let down = objective(&probe, seq, weights, activity)?.total;
            probe.blocks_mut()[b].1[i] = original;
            let numeric = (up - down) / (2.0 * GRADIENT_CHECK_STEP);
            let denom = a.abs().max(numeric.abs()).max(GRADIENT_CHECK_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
        blocks.push((name, worst));
    }
    let max_relative_error = blocks.iter().map(|b| b.1).fold(0.0, f64::max);
    Ok(GradientCheckReport { blocks, max_relative_error, passed: max_relative_error < tolerance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn link_loss_two_pairs() {
        let probs = array![[0.0, 0.9, 0.2], [0.9, 0.0, 0.0], [0.2, 0.0, 0.0]];
        let adj = Adjacency::from_edges(3, false, &[(0, 1)]).unwrap();
        let l = link_loss(&probs, &adj, &[(0, 1), (0, 2)]).unwrap();
        let expected = -(0.9f64.ln() + 0.8f64.ln()) / 2.0;
        assert!((l - expected).abs() < 1e-12);
        assert!((l - 0.164_252).abs() < 1e-6);
    }

    #[test]
    fn link_loss_rejects_empty_and_out_of_range() {
        let probs = Array2::zeros((2, 2));
        let adj = Adjacency::empty(2, false);
        assert!(matches!(link_loss(&probs, &adj, &[]), Err(TrainError::EmptyPairs)));
        assert!(matches!(link_loss(&probs, &adj, &[(0, 5)]), Err(TrainError::PairOutOfRange(0, 5))));
    }

    #[test]
    fn clamp_keeps_loss_finite() {
        assert!(bce(0.0, 1.0).is_finite());
        assert!((bce(0.0, 1.0) + 1e-12f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn activity_loss_skips_silent_users() {
        let probs = array![[0.5, 0.5], [0.9, 0.1]];
        let counts = array![[2.0, 1.0], [0.0, 0.0]];
        let expected = -(0.5f64.ln() + 0.5 * 0.5f64.ln());
        assert!((activity_loss(&probs, &counts) - expected).abs() < 1e-12);
        assert_eq!(activity_loss(&probs, &Array2::zeros((2, 2))), 0.0);
    }

    #[test]
    fn weighted_total() {
        assert!((total_loss(0.2, 0.4, LossWeights::new(0.3, 0.7)) - 0.34).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.lambda_link = 0.0;
        c.lambda_activity = 0.0;
        assert!(c.validate().is_err());
        c = TrainConfig { learning_rate: 0.0, ..TrainConfig::default() };
        assert!(c.validate().is_err());
    }
}
