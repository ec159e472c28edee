//! Evaluation metrics and the evaluation report.

use std::collections::HashSet;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graphgen::{split_dataset, Adjacency, GraphGenError, Snapshot, TemporalDataset};
use crate::model::EvolutionModel;
use crate::numeric::{argmax, PROB_CLAMP};
use crate::predict::{classify_edge, rank_candidates, rollout, PredictError, EDGE_THRESHOLD};
use crate::train::sample_negatives;

pub const TOP_K: usize = 10;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("evaluation set is empty")]
    Empty,
    #[error("{0} predictions but {1} labels")]
    LengthMismatch(usize, usize),
    #[error("label {label} is outside the {width} categories")]
    LabelOutOfRange { label: usize, width: usize },
    #[error("AUC needs at least one positive and one negative")]
    SingleClass,
    #[error("no ground-truth edges")]
    NoTruth,
    #[error("need at least 3 steps for pseudo-perplexity, got {0}")]
    TooFewSteps(usize),
    #[error(transparent)]
    Split(#[from] GraphGenError),
    #[error(transparent)]
    Predict(#[from] PredictError),
}

/// Rescales non-negative scores onto the simplex; an all-zero row becomes uniform.
pub fn renormalize(scores: &[f64]) -> Vec<f64> {
    let total: f64 = scores.iter().sum();
    if total > 0.0 {
        scores.iter().map(|s| s / total).collect()
    } else {
        vec![1.0 / scores.len() as f64; scores.len()]
    }
}

/// Dominant category of a count vector, or `None` when it is all zero.
pub fn dominant_category(counts: &[f64]) -> Option<usize> {
    counts.iter().any(|&c| c > 0.0).then(|| argmax(counts))
}

/// `exp(mean(-ln q(label)))` with `q` clamped below at 1e-12.
pub fn perplexity(distributions: &[Vec<f64>], labels: &[usize]) -> Result<f64, MetricsError> {
    if distributions.len() != labels.len() {
        return Err(MetricsError::LengthMismatch(distributions.len(), labels.len()));
    }
    if labels.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut nll = 0.0;
    for (q, &label) in distributions.iter().zip(labels) {
        let p = *q.get(label).ok_or(MetricsError::LabelOutOfRange { label, width: q.len() })?;
        nll -= p.max(PROB_CLAMP).log2();
    }
    // Base 2 keeps dyadic cases exact.
    Ok((nll / labels.len() as f64).exp2())
}

/// Probability that a random positive outscores a random negative, ties counting one half.
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch(scores.len(), labels.len()));
    }
    let positives = labels.iter().filter(|&&l| l).count() as u64;
    let negatives = labels.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the number of won pairs plus tied pairs
    let mut doubled: u64 = 0;
    let mut negatives_below: u64 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let group_pos = order[start..end].iter().filter(|&&i| labels[i]).count() as u64;
        let group_neg = (end - start) as u64 - group_pos;
        doubled += 2 * group_pos * negatives_below + group_pos * group_neg;
        negatives_below += group_neg;
        start = end;
    }
    Ok(doubled as f64 / (2 * positives * negatives) as f64)
}

fn top(list: &[usize], k: usize) -> &[usize] {
    &list[..list.len().min(k)]
}

/// Share of ground-truth edges `(i, j)` with `j` in `i`'s top 10 (either direction when undirected).
pub fn hits_at_10(ranked: &[Vec<usize>], truths: &[(usize, usize)], directed: bool) -> Result<f64, MetricsError> {
    if truths.is_empty() {
        return Err(MetricsError::NoTruth);
    }
    let in_top = |i: usize, j: usize| ranked.get(i).is_some_and(|l| top(l, TOP_K).contains(&j));
    let hits = truths.iter().filter(|&&(i, j)| in_top(i, j) || (!directed && in_top(j, i))).count();
    Ok(hits as f64 / truths.len() as f64)
}

/// Mean over users with at least one true new edge of `|top10 ∩ truth| / min(10, candidates)`.
pub fn precision_at_10(ranked: &[Vec<usize>], truths: &[(usize, usize)], directed: bool) -> Result<f64, MetricsError> {
    if truths.is_empty() {
        return Err(MetricsError::NoTruth);
    }
    let mut per_user: Vec<HashSet<usize>> = vec![HashSet::new(); ranked.len()];
    for &(i, j) in truths {
        if let Some(s) = per_user.get_mut(i) {
            s.insert(j);
        }
        if !directed {
            if let Some(s) = per_user.get_mut(j) {
                s.insert(i);
            }
        }
    }
    let mut total = 0.0;
    let mut users = 0usize;
    for (list, truth) in ranked.iter().zip(&per_user) {
        if truth.is_empty() {
            continue;
        }
        users += 1;
        let head = top(list, TOP_K);
        if !head.is_empty() {
            total += head.iter().filter(|j| truth.contains(j)).count() as f64 / head.len() as f64;
        }
    }
    if users == 0 {
        return Err(MetricsError::NoTruth);
    }
    Ok(total / users as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct Confusion {
    tp: u64,
    fp: u64,
    fn_: u64,
}

impl Confusion {
    fn f1(self) -> f64 {
        if self.tp + self.fp + self.fn_ == 0 {
            return 1.0;
        }
        (2 * self.tp) as f64 / (2 * self.tp + self.fp + self.fn_) as f64
    }
}

fn confusions(predicted: &[Vec<bool>], truth: &[Vec<bool>]) -> Vec<Confusion> {
    let width = predicted.iter().chain(truth).map(Vec::len).max().unwrap_or(0);
    let mut out = vec![Confusion::default(); width];
    for (p, t) in predicted.iter().zip(truth) {
        for (c, conf) in out.iter_mut().enumerate() {
            match (p.get(c).copied().unwrap_or(false), t.get(c).copied().unwrap_or(false)) {
                (true, true) => conf.tp += 1,
                (true, false) => conf.fp += 1,
                (false, true) => conf.fn_ += 1,
                (false, false) => {}
            }
        }
    }
    out
}

/// Unweighted mean of per-category F1 over pooled rows. A category empty on both sides
/// scores 1.
pub fn macro_f1(predicted: &[Vec<bool>], truth: &[Vec<bool>]) -> f64 {
    let conf = confusions(predicted, truth);
    if conf.is_empty() {
        return 1.0;
    }
    conf.iter().map(|c| c.f1()).sum::<f64>() / conf.len() as f64
}

pub fn accuracy(predicted: &[bool], truth: &[bool]) -> Result<f64, MetricsError> {
    if predicted.len() != truth.len() {
        return Err(MetricsError::LengthMismatch(predicted.len(), truth.len()));
    }
    if truth.is_empty() {
        return Err(MetricsError::Empty);
    }
    let right = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(right as f64 / truth.len() as f64)
}

// ---- reports -----------------------------------------------------------------

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub stage: usize,
    pub perplexity: Option<f64>,
    pub precision_at_10: Option<f64>,
    pub hits_at_10: Option<f64>,
    pub auc_roc: Option<f64>,
    pub macro_f1: Option<f64>,
    pub accuracy: Option<f64>,
}

/// Metrics pooled over all forecast stages; a field is `None` when undefined on the data.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub perplexity: Option<f64>,
    pub pseudo_perplexity: Option<f64>,
    pub precision_at_10: Option<f64>,
    pub hits_at_10: Option<f64>,
    pub auc_roc: Option<f64>,
    pub macro_f1: Option<f64>,
    pub accuracy: Option<f64>,
    pub parse_failures: usize,
    pub stages: Vec<StageMetrics>,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

impl EvalReport {
    /// Fixed-order plain-text table.
    pub fn to_table(&self) -> String {
        let rows = [
            ("perplexity", cell(self.perplexity)),
            ("pseudo_perplexity", cell(self.pseudo_perplexity)),
            ("precision_at_10", cell(self.precision_at_10)),
            ("hits_at_10", cell(self.hits_at_10)),
            ("auc_roc", cell(self.auc_roc)),
            ("macro_f1", cell(self.macro_f1)),
            ("accuracy", cell(self.accuracy)),
            ("parse_failures", self.parse_failures.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in rows {
            out.push_str(&format!("{k:<18} {v}\n"));
        }
        out
    }
}

/// Scores produced for one forecast stage by either the trained model or the LLM path.
#[derive(Clone, Debug, PartialEq)]
pub struct StagePrediction {
    pub stage: usize,
    /// `[i, j]` is the score for edge `i -> j`; undirected scores must be symmetric.
    pub edge_scores: Array2<f64>,
    /// Per-user, per-category activity probabilities.
    pub activity: Array2<f64>,
}

#[derive(Default)]
struct Pool {
    distributions: Vec<Vec<f64>>,
    labels: Vec<usize>,
    scores: Vec<f64>,
    edge_labels: Vec<bool>,
    decisions: Vec<bool>,
    truths: Vec<(usize, usize)>,
    ranked: Vec<Vec<usize>>,
    active_pred: Vec<Vec<bool>>,
    active_true: Vec<Vec<bool>>,
    hits: Vec<(f64, usize)>,
    precision: Vec<(f64, usize)>,
}

fn new_edges(target: &Adjacency, base: &Adjacency) -> Vec<(usize, usize)> {
    target.edges().into_iter().filter(|&(i, j)| !base.has_edge(i, j)).collect()
}

fn truth_users(truths: &[(usize, usize)], directed: bool) -> usize {
    let mut users: HashSet<usize> = truths.iter().map(|t| t.0).collect();
    if !directed {
        users.extend(truths.iter().map(|t| t.1));
    }
    users.len()
}

fn score_stage(
    pred: &StagePrediction,
    truth: &Snapshot,
    base: &Adjacency,
    directed: bool,
    rng: &mut ChaCha8Rng,
    pool: &mut Pool,
) -> Result<StageMetrics, MetricsError> {
    let n = truth.adjacency.len();
    let mut m = StageMetrics { stage: pred.stage, ..StageMetrics::default() };

    let mut dists = Vec::new();
    let mut labels = Vec::new();
    let mut act_pred = Vec::with_capacity(n);
    let mut act_true = Vec::with_capacity(n);
    for u in 0..n {
        let probs = pred.activity.row(u).to_vec();
        let counts = truth.category_counts(u);
        if let Some(label) = dominant_category(&counts) {
            dists.push(renormalize(&probs));
            labels.push(label);
        }
        act_pred.push(probs.iter().map(|&p| p > 0.5).collect::<Vec<_>>());
        act_true.push(counts.iter().map(|&c| c > 0.0).collect::<Vec<_>>());
    }
    m.perplexity = perplexity(&dists, &labels).ok();
    m.macro_f1 = Some(macro_f1(&act_pred, &act_true));

    let positives = truth.adjacency.edges();
    let negatives = sample_negatives(&truth.adjacency, positives.len(), rng);
    let mut scores = Vec::new();
    let mut edge_labels = Vec::new();
    for (&(i, j), label) in positives.iter().map(|p| (p, true)).chain(negatives.iter().map(|p| (p, false))) {
        scores.push(pred.edge_scores[[i, j]]);
        edge_labels.push(label);
    }
    let decisions: Vec<bool> = scores.iter().map(|&s| classify_edge(s, EDGE_THRESHOLD)).collect();
    m.auc_roc = auc_roc(&scores, &edge_labels).ok();
    m.accuracy = accuracy(&decisions, &edge_labels).ok();

    let ranked: Vec<Vec<usize>> =
        (0..n).map(|u| rank_candidates(u, &pred.edge_scores, Some(base), TOP_K)).collect::<Result<_, _>>()?;
    let truths = new_edges(&truth.adjacency, base);
    m.hits_at_10 = hits_at_10(&ranked, &truths, directed).ok();
    m.precision_at_10 = precision_at_10(&ranked, &truths, directed).ok();

    if let Some(h) = m.hits_at_10 {
        pool.hits.push((h, truths.len()));
    }
    if let Some(p) = m.precision_at_10 {
        pool.precision.push((p, truth_users(&truths, directed)));
    }
    pool.distributions.extend(dists);
    pool.labels.extend(labels);
    pool.scores.extend(scores);
    pool.edge_labels.extend(edge_labels);
    pool.decisions.extend(decisions);
    pool.truths.extend(truths);
    pool.ranked.extend(ranked);
    pool.active_pred.extend(act_pred);
    pool.active_true.extend(act_true);
    Ok(m)
}

fn weighted_mean(parts: &[(f64, usize)]) -> Option<f64> {
    let weight: usize = parts.iter().map(|p| p.1).sum();
    (weight > 0).then(|| parts.iter().map(|(v, w)| v * *w as f64).sum::<f64>() / weight as f64)
}

/// Scores stage predictions against the target steps. Negatives for AUC and accuracy are
/// drawn from `seed`; ranking excludes edges present at the last conditioning step.
pub fn score_forecasts(
    predictions: &[StagePrediction],
    conditioning: &TemporalDataset,
    target: &TemporalDataset,
    seed: u64,
) -> Result<EvalReport, MetricsError> {
    let base = &conditioning.last().adjacency;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(11);
    let mut pool = Pool::default();
    let mut stages = Vec::with_capacity(predictions.len());
    for (pred, truth) in predictions.iter().zip(&target.snapshots) {
        stages.push(score_stage(pred, truth, base, target.directed, &mut rng, &mut pool)?);
    }
    Ok(EvalReport {
        perplexity: perplexity(&pool.distributions, &pool.labels).ok(),
        pseudo_perplexity: None,
        precision_at_10: weighted_mean(&pool.precision),
        hits_at_10: weighted_mean(&pool.hits),
        auc_roc: auc_roc(&pool.scores, &pool.edge_labels).ok(),
        macro_f1: (!pool.active_true.is_empty()).then(|| macro_f1(&pool.active_pred, &pool.active_true)),
        accuracy: accuracy(&pool.decisions, &pool.edge_labels).ok(),
        parse_failures: 0,
        stages,
    })
}

/// Masked-step perplexity over interior steps of `ds`.
///
/// Step `t` is encoded with its posts and engagement removed. Cross-modal context is the
/// mean of the fused vectors at `t - 1` and `t + 1` from a forward pass over the unmasked
/// sequence.
pub fn pseudo_perplexity(model: &EvolutionModel, ds: &TemporalDataset) -> Result<f64, MetricsError> {
    let steps = ds.step_count();
    if steps < 3 {
        return Err(MetricsError::TooFewSteps(steps));
    }
    let mut fused: Vec<Vec<Array1<f64>>> = Vec::with_capacity(steps);
    for snap in &ds.snapshots {
        let raw = model.encoder.encode(&ds.profiles, &ds.vocabularies, snap).map_err(PredictError::from)?;
        let out = model.step(&raw, fused.last().map(Vec::as_slice))?;
        fused.push(out.fused_vectors());
    }
    let mut dists = Vec::new();
    let mut labels = Vec::new();
    for t in 1..steps - 1 {
        let snap = &ds.snapshots[t];
        let masked = snap.masked();
        let raw = model.encoder.encode(&ds.profiles, &ds.vocabularies, &masked).map_err(PredictError::from)?;
        let context: Vec<Array1<f64>> =
            fused[t - 1].iter().zip(&fused[t + 1]).map(|(a, b)| (a + b) / 2.0).collect();
        let out = model.step(&raw, Some(&context))?;
        for u in 0..ds.user_count() {
            if let Some(label) = dominant_category(&snap.category_counts(u)) {
                dists.push(renormalize(&out.activity_probs.row(u).to_vec()));
                labels.push(label);
            }
        }
    }
    perplexity(&dists, &labels)
}

/// Splits `ds`, rolls the model out over the held-out horizon and scores every stage.
pub fn evaluate_model(
    model: &EvolutionModel,
    ds: &TemporalDataset,
    horizon: usize,
    seed: u64,
) -> Result<EvalReport, MetricsError> {
    let (conditioning, target) = split_dataset(ds, horizon)?;
    let forecast = rollout(model, &conditioning, horizon)?;
    let predictions: Vec<StagePrediction> = forecast
        .stages
        .into_iter()
        .map(|s| StagePrediction { stage: s.stage, edge_scores: s.edge_probs, activity: s.activity_probs })
        .collect();
    let mut report = score_forecasts(&predictions, &conditioning, &target, seed)?;
    report.pseudo_perplexity = pseudo_perplexity(model, ds).ok();
    Ok(report)
}
