//! Fusion of the three modality embeddings, with hand-derived backward passes.
//!
//! Raw embeddings are first projected to a common width `d` by learned matrices.
//! The fused vector is then one of:
//!
//! - concatenation `[e_d; e_p; e_e]` (width `3d`);
//! - score attention: `s_m = w_m . e_m`, `alpha = softmax(s)`, `f = sum_m alpha_m e_m`;
//! - cross-modal attention: `q = W_q f_prev`, `alpha = softmax(q . e_m / sqrt(d))`,
//!   `f = sum_m alpha_m e_m` where keys and values are the projected modalities.
//!
//! The softmax for score attention runs jointly across the three scalar scores.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::RawModalities;
use crate::numeric::{softmax, softmax_backward, uniform_vec, xavier};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FusionError {
    #[error("unknown fusion strategy {0:?} (expected concat, attention or crossmodal)")]
    UnknownStrategy(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionStrategy {
    Concat,
    Attention,
    #[serde(rename = "crossmodal")]
    CrossModal,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 3] =
        [FusionStrategy::Concat, FusionStrategy::Attention, FusionStrategy::CrossModal];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionStrategy::Concat => "concat",
            FusionStrategy::Attention => "attention",
            FusionStrategy::CrossModal => "crossmodal",
        }
    }

    /// Width of the fused vector for common modality width `d`.
    pub fn fused_width(self, d: usize) -> usize {
        match self {
            FusionStrategy::Concat => 3 * d,
            _ => d,
        }
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionStrategy {
    type Err = FusionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "concat" => Ok(FusionStrategy::Concat),
            "attention" => Ok(FusionStrategy::Attention),
            "crossmodal" | "cross-modal" => Ok(FusionStrategy::CrossModal),
            other => Err(FusionError::UnknownStrategy(other.to_string())),
        }
    }
}

/// Projected modality vectors sharing width `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityTriple {
    pub e_d: Array1<f64>,
    pub e_p: Array1<f64>,
    pub e_e: Array1<f64>,
}

impl ModalityTriple {
    pub fn new(e_d: Array1<f64>, e_p: Array1<f64>, e_e: Array1<f64>) -> Self {
        debug_assert!(e_d.len() == e_p.len() && e_p.len() == e_e.len());
        Self { e_d, e_p, e_e }
    }

    pub fn dim(&self) -> usize {
        self.e_d.len()
    }

    pub fn as_array(&self) -> [&Array1<f64>; 3] {
        [&self.e_d, &self.e_p, &self.e_e]
    }

    /// `(e_d + e_p + e_e) / 3`, the context used before any fused vector exists.
    pub fn mean(&self) -> Array1<f64> {
        (&self.e_d + &self.e_p + &self.e_e) / 3.0
    }
}

/// Gradient with respect to each projected modality.
#[derive(Clone, Debug, PartialEq)]
pub struct TripleGrad {
    pub d_e_d: Array1<f64>,
    pub d_e_p: Array1<f64>,
    pub d_e_e: Array1<f64>,
}

impl TripleGrad {
    fn zeros(d: usize) -> Self {
        Self { d_e_d: Array1::zeros(d), d_e_p: Array1::zeros(d), d_e_e: Array1::zeros(d) }
    }

    fn parts_mut(&mut self) -> [&mut Array1<f64>; 3] {
        [&mut self.d_e_d, &mut self.d_e_p, &mut self.d_e_e]
    }

    pub fn parts(&self) -> [&Array1<f64>; 3] {
        [&self.d_e_d, &self.d_e_p, &self.d_e_e]
    }
}

/// Learned fusion parameters. All blocks exist for every strategy; only the ones the
/// active strategy reads receive gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionParams {
    pub strategy: FusionStrategy,
    #[serde(with = "crate::numeric::mat")]
    pub proj_d: Array2<f64>,
    #[serde(with = "crate::numeric::mat")]
    pub proj_p: Array2<f64>,
    #[serde(with = "crate::numeric::mat")]
    pub proj_e: Array2<f64>,
    #[serde(with = "crate::numeric::vector")]
    pub w_d: Array1<f64>,
    #[serde(with = "crate::numeric::vector")]
    pub w_p: Array1<f64>,
    #[serde(with = "crate::numeric::vector")]
    pub w_e: Array1<f64>,
    #[serde(with = "crate::numeric::mat")]
    pub w_q: Array2<f64>,
}

impl FusionParams {
    pub fn init<R: Rng + ?Sized>(strategy: FusionStrategy, raw_dims: [usize; 3], d: usize, rng: &mut R) -> Self {
        Self {
            strategy,
            proj_d: xavier(d, raw_dims[0], rng),
            proj_p: xavier(d, raw_dims[1], rng),
            proj_e: xavier(d, raw_dims[2], rng),
            w_d: uniform_vec(d, 0.1, rng),
            w_p: uniform_vec(d, 0.1, rng),
            w_e: uniform_vec(d, 0.1, rng),
            w_q: xavier(d, d, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            strategy: self.strategy,
            proj_d: Array2::zeros(self.proj_d.raw_dim()),
            proj_p: Array2::zeros(self.proj_p.raw_dim()),
            proj_e: Array2::zeros(self.proj_e.raw_dim()),
            w_d: Array1::zeros(self.w_d.len()),
            w_p: Array1::zeros(self.w_p.len()),
            w_e: Array1::zeros(self.w_e.len()),
            w_q: Array2::zeros(self.w_q.raw_dim()),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_d.len()
    }

    pub fn projections(&self) -> [&Array2<f64>; 3] {
        [&self.proj_d, &self.proj_p, &self.proj_e]
    }

    fn score_vectors(&self) -> [&Array1<f64>; 3] {
        [&self.w_d, &self.w_p, &self.w_e]
    }

    /// Applies the three learned projections.
    pub fn project(&self, raw: &RawModalities) -> ModalityTriple {
        let [d, p, e] = raw.views();
        ModalityTriple::new(self.proj_d.dot(&d), self.proj_p.dot(&p), self.proj_e.dot(&e))
    }

    /// Accumulates projection gradients for `d_triple` into `grads`.
    pub fn project_backward(raw: &RawModalities, d_triple: &TripleGrad, grads: &mut FusionParams) {
        let [rd, rp, re] = raw.views();
        add_outer(&mut grads.proj_d, &d_triple.d_e_d.view(), &rd);
        add_outer(&mut grads.proj_p, &d_triple.d_e_p.view(), &rp);
        add_outer(&mut grads.proj_e, &d_triple.d_e_e.view(), &re);
    }
}

pub(crate) fn add_outer(target: &mut Array2<f64>, left: &ArrayView1<f64>, right: &ArrayView1<f64>) {
    for (i, &l) in left.iter().enumerate() {
        if l == 0.0 {
            continue;
        }
        let mut row = target.row_mut(i);
        row.scaled_add(l, right);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedEmbedding {
    pub f: Array1<f64>,
    pub strategy: FusionStrategy,
    /// Modality weights `(alpha_D, alpha_P, alpha_E)`; `None` for concatenation.
    pub alphas: Option<[f64; 3]>,
}

pub fn fuse_concat(triple: &ModalityTriple) -> FusedEmbedding {
    let f = ndarray::concatenate![ndarray::Axis(0), triple.e_d, triple.e_p, triple.e_e];
    FusedEmbedding { f, strategy: FusionStrategy::Concat, alphas: None }
}

fn weighted_sum(triple: &ModalityTriple, alphas: &[f64]) -> Array1<f64> {
    let mut f = Array1::zeros(triple.dim());
    for (e, &a) in triple.as_array().into_iter().zip(alphas) {
        f.scaled_add(a, e);
    }
    f
}

fn to_triple(v: Vec<f64>) -> [f64; 3] {
    [v[0], v[1], v[2]]
}

pub fn attention_scores(triple: &ModalityTriple, params: &FusionParams) -> [f64; 3] {
    let w = params.score_vectors();
    let e = triple.as_array();
    [w[0].dot(e[0]), w[1].dot(e[1]), w[2].dot(e[2])]
}

pub fn fuse_attention(triple: &ModalityTriple, params: &FusionParams) -> FusedEmbedding {
    let alphas = softmax(&attention_scores(triple, params));
    FusedEmbedding {
        f: weighted_sum(triple, &alphas),
        strategy: FusionStrategy::Attention,
        alphas: Some(to_triple(alphas)),
    }
}

pub fn crossmodal_logits(triple: &ModalityTriple, f_prev: &Array1<f64>, params: &FusionParams) -> [f64; 3] {
    let q = params.w_q.dot(f_prev);
    let scale = (triple.dim() as f64).sqrt();
    let e = triple.as_array();
    [q.dot(e[0]) / scale, q.dot(e[1]) / scale, q.dot(e[2]) / scale]
}

pub fn fuse_crossmodal(triple: &ModalityTriple, f_prev: &Array1<f64>, params: &FusionParams) -> FusedEmbedding {
    let alphas = softmax(&crossmodal_logits(triple, f_prev, params));
    FusedEmbedding {
        f: weighted_sum(triple, &alphas),
        strategy: FusionStrategy::CrossModal,
        alphas: Some(to_triple(alphas)),
    }
}

/// Strategy dispatch. `f_prev` is read only by cross-modal fusion, which falls back to
/// the triple mean when it is absent.
pub fn fuse(triple: &ModalityTriple, f_prev: Option<&Array1<f64>>, params: &FusionParams) -> FusedEmbedding {
    match params.strategy {
        FusionStrategy::Concat => fuse_concat(triple),
        FusionStrategy::Attention => fuse_attention(triple, params),
        FusionStrategy::CrossModal => match f_prev {
            Some(prev) => fuse_crossmodal(triple, prev, params),
            None => fuse_crossmodal(triple, &triple.mean(), params),
        },
    }
}

/// Backward of [`fuse`]. Parameter gradients are accumulated into `grads`; the return
/// value holds the gradient for the triple and, for cross-modal fusion, for `f_prev`.
pub fn fuse_backward(
    triple: &ModalityTriple,
    f_prev: Option<&Array1<f64>>,
    params: &FusionParams,
    fused: &FusedEmbedding,
    d_f: &Array1<f64>,
    grads: &mut FusionParams,
) -> (TripleGrad, Option<Array1<f64>>) {
    let d = triple.dim();
    let mut out = TripleGrad::zeros(d);
    match params.strategy {
        FusionStrategy::Concat => {
            out.d_e_d.assign(&d_f.slice(ndarray::s![0..d]));
            out.d_e_p.assign(&d_f.slice(ndarray::s![d..2 * d]));
            out.d_e_e.assign(&d_f.slice(ndarray::s![2 * d..3 * d]));
            (out, None)
        }
        FusionStrategy::Attention => {
            let alphas = fused.alphas.expect("attention output carries weights");
            let d_scores = alpha_backward(triple, &alphas, d_f, &mut out);
            let w = params.score_vectors();
            let e = triple.as_array();
            let gw = [&mut grads.w_d, &mut grads.w_p, &mut grads.w_e];
            for (m, g) in gw.into_iter().enumerate() {
                g.scaled_add(d_scores[m], e[m]);
            }
            for (m, part) in out.parts_mut().into_iter().enumerate() {
                part.scaled_add(d_scores[m], w[m]);
            }
            (out, None)
        }
        FusionStrategy::CrossModal => {
            let mean;
            let prev = match f_prev {
                Some(p) => p,
                None => {
                    mean = triple.mean();
                    &mean
                }
            };
            let alphas = fused.alphas.expect("cross-modal output carries weights");
            let d_logits = alpha_backward(triple, &alphas, d_f, &mut out);
            let scale = (d as f64).sqrt();
            let q = params.w_q.dot(prev);
            let e = triple.as_array();
            let mut d_q = Array1::zeros(d);
            for m in 0..3 {
                d_q.scaled_add(d_logits[m] / scale, e[m]);
            }
            for (m, part) in out.parts_mut().into_iter().enumerate() {
                part.scaled_add(d_logits[m] / scale, &q);
            }
            add_outer(&mut grads.w_q, &d_q.view(), &prev.view());
            let d_prev = params.w_q.t().dot(&d_q);
            if f_prev.is_none() {
                // f_prev was the triple mean.
                for part in out.parts_mut() {
                    part.scaled_add(1.0 / 3.0, &d_prev);
                }
                (out, None)
            } else {
                (out, Some(d_prev))
            }
        }
    }
}

/// Shared tail of both attention variants: gradient through `f = sum alpha_m e_m`.
/// Adds the direct value path into `out` and returns the gradient w.r.t. the logits.
fn alpha_backward(triple: &ModalityTriple, alphas: &[f64; 3], d_f: &Array1<f64>, out: &mut TripleGrad) -> Vec<f64> {
    let e = triple.as_array();
    let d_alpha: Vec<f64> = (0..3).map(|m| d_f.dot(e[m])).collect();
    for (m, part) in out.parts_mut().into_iter().enumerate() {
        part.scaled_add(alphas[m], d_f);
    }
    softmax_backward(alphas, &d_alpha)
}
