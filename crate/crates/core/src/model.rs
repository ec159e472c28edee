//! Parameter container, the assembled model and its checkpoint format.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::embed::{Encoder, RawModalities};
use crate::fusion::{fuse, FusionParams, FusionStrategy};
use crate::graphgen::{TemporalDataset, CATEGORY_COUNT};
use crate::metrics::EvalReport;
use crate::predict::{
    activity_probabilities, edge_probability_matrix, predictor_forward, PredictError, PredictorParams, StepOutput,
};
use crate::train::TrainConfig;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub raw: [usize; 3],
    pub d: usize,
    pub hidden: usize,
    pub out: usize,
}

impl ModelDims {
    pub fn new(raw: [usize; 3], d: usize) -> Self {
        Self { raw, d, hidden: d, out: d }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    pub fusion: FusionParams,
    pub predictor: PredictorParams,
}

impl ModelParams {
    pub fn init(strategy: FusionStrategy, dims: ModelDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fusion = FusionParams::init(strategy, dims.raw, dims.d, &mut rng);
        let predictor = PredictorParams::init(strategy.fused_width(dims.d), dims.hidden, dims.out, &mut rng);
        Self { fusion, predictor }
    }

    pub fn zeros_like(&self) -> Self {
        Self { fusion: self.fusion.zeros_like(), predictor: self.predictor.zeros_like() }
    }

    pub fn strategy(&self) -> FusionStrategy {
        self.fusion.strategy
    }

    pub fn dims(&self) -> ModelDims {
        let f = &self.fusion;
        ModelDims {
            raw: [f.proj_d.ncols(), f.proj_p.ncols(), f.proj_e.ncols()],
            d: f.dim(),
            hidden: self.predictor.w_hidden.nrows(),
            out: self.predictor.output_width(),
        }
    }

    /// Every parameter block as a flat slice, in a fixed order.
    pub fn blocks(&self) -> Vec<(&'static str, &[f64])> {
        let f = &self.fusion;
        let p = &self.predictor;
        vec![
            ("proj_d", slice2(&f.proj_d)),
            ("proj_p", slice2(&f.proj_p)),
            ("proj_e", slice2(&f.proj_e)),
            ("w_d", slice1(&f.w_d)),
            ("w_p", slice1(&f.w_p)),
            ("w_e", slice1(&f.w_e)),
            ("w_q", slice2(&f.w_q)),
            ("w_hidden", slice2(&p.w_hidden)),
            ("b_hidden", slice1(&p.b_hidden)),
            ("w_out", slice2(&p.w_out)),
            ("b_out", slice1(&p.b_out)),
            ("w_link", slice1(&p.w_link)),
            ("w_pair", slice1(&p.w_pair)),
            ("b_link", slice1(&p.b_link)),
            ("w_activity", slice2(&p.w_activity)),
            ("b_activity", slice1(&p.b_activity)),
        ]
    }

    /// Mutable counterpart of [`ModelParams::blocks`], same order.
    pub fn blocks_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let FusionParams { proj_d, proj_p, proj_e, w_d, w_p, w_e, w_q, .. } = &mut self.fusion;
        let PredictorParams { w_hidden, b_hidden, w_out, b_out, w_link, w_pair, b_link, w_activity, b_activity } =
            &mut self.predictor;
        vec![
            ("proj_d", slice2_mut(proj_d)),
            ("proj_p", slice2_mut(proj_p)),
            ("proj_e", slice2_mut(proj_e)),
            ("w_d", slice1_mut(w_d)),
            ("w_p", slice1_mut(w_p)),
            ("w_e", slice1_mut(w_e)),
            ("w_q", slice2_mut(w_q)),
            ("w_hidden", slice2_mut(w_hidden)),
            ("b_hidden", slice1_mut(b_hidden)),
            ("w_out", slice2_mut(w_out)),
            ("b_out", slice1_mut(b_out)),
            ("w_link", slice1_mut(w_link)),
            ("w_pair", slice1_mut(w_pair)),
            ("b_link", slice1_mut(b_link)),
            ("w_activity", slice2_mut(w_activity)),
            ("b_activity", slice1_mut(b_activity)),
        ]
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|(_, b)| b.iter().all(|v| v.is_finite()))
    }

    fn shapes_consistent(&self) -> bool {
        let dims = self.dims();
        let f = &self.fusion;
        let p = &self.predictor;
        let fused = self.strategy().fused_width(dims.d);
        f.proj_d.nrows() == dims.d
            && f.proj_p.nrows() == dims.d
            && f.proj_e.nrows() == dims.d
            && f.w_p.len() == dims.d
            && f.w_e.len() == dims.d
            && f.w_q.dim() == (dims.d, dims.d)
            && p.w_hidden.ncols() == fused
            && p.b_hidden.len() == dims.hidden
            && p.w_out.ncols() == dims.hidden
            && p.b_out.len() == dims.out
            && p.w_link.len() == 2 * dims.out
            && p.w_pair.len() == dims.out
            && p.b_link.len() == 1
            && p.w_activity.dim() == (CATEGORY_COUNT, dims.out)
            && p.b_activity.len() == CATEGORY_COUNT
    }
}

fn slice1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn slice2(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn slice1_mut(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

fn slice2_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

/// Frozen encoder plus learned parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct EvolutionModel {
    pub directed: bool,
    pub encoder: Encoder,
    pub params: ModelParams,
}

impl EvolutionModel {
    pub fn strategy(&self) -> FusionStrategy {
        self.params.strategy()
    }

    /// Runs fusion, predictor and both heads for every user at one step. `context` holds
    /// the previous step's fused vectors and is read only by cross-modal fusion.
    pub fn step(&self, raw: &[RawModalities], context: Option<&[Array1<f64>]>) -> Result<StepOutput, PredictError> {
        let n = raw.len();
        let p = &self.params;
        let mut fused = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        let mut activity = Array2::zeros((n, CATEGORY_COUNT));
        for (u, r) in raw.iter().enumerate() {
            let triple = p.fusion.project(r);
            let f = fuse(&triple, context.map(|c| &c[u]), &p.fusion);
            let y = predictor_forward(&f.f, &p.predictor)?;
            for (c, v) in activity_probabilities(&y, &p.predictor).into_iter().enumerate() {
                activity[[u, c]] = v;
            }
            fused.push(f);
            ys.push(y);
        }
        let edge_probs = edge_probability_matrix(&ys, self.directed, &p.predictor);
        Ok(StepOutput { fused, ys, edge_probs, activity_probs: activity })
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("unsupported checkpoint schema version {0}")]
    SchemaVersion(u32),
    #[error("checkpoint was trained on a different dataset (fingerprint {expected}, got {actual})")]
    StaleFingerprint { expected: String, actual: String },
    #[error("parameter shapes do not match the declared dimensions")]
    ShapeMismatch,
}

/// Hex SHA-256 of the canonical dataset JSON.
pub fn dataset_fingerprint(ds: &TemporalDataset) -> String {
    let digest = Sha256::digest(ds.to_json().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub strategy: FusionStrategy,
    pub directed: bool,
    pub dims: ModelDims,
    pub params: ModelParams,
    pub encoder: Encoder,
    pub train_config: TrainConfig,
    pub final_metrics: Option<EvalReport>,
    pub dataset_fingerprint: String,
}

impl Checkpoint {
    pub fn new(
        model: &EvolutionModel,
        train_config: TrainConfig,
        final_metrics: Option<EvalReport>,
        dataset: &TemporalDataset,
    ) -> Self {
        Self {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            strategy: model.strategy(),
            directed: model.directed,
            dims: model.params.dims(),
            params: model.params.clone(),
            encoder: model.encoder.clone(),
            train_config,
            final_metrics,
            dataset_fingerprint: dataset_fingerprint(dataset),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serialises")
    }

    pub fn from_json(text: &str) -> Result<Self, CheckpointError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let version = value.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if version != CHECKPOINT_SCHEMA_VERSION {
            return Err(CheckpointError::SchemaVersion(version));
        }
        let ckpt: Checkpoint =
            serde_json::from_value(value).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        if ckpt.params.strategy() != ckpt.strategy
            || ckpt.params.dims() != ckpt.dims
            || !ckpt.params.shapes_consistent()
            || ckpt.encoder.raw_dims() != ckpt.dims.raw
        {
            return Err(CheckpointError::ShapeMismatch);
        }
        Ok(ckpt)
    }

    /// Rejects a checkpoint whose fingerprint does not match `dataset`.
    pub fn verify_dataset(&self, dataset: &TemporalDataset) -> Result<(), CheckpointError> {
        let actual = dataset_fingerprint(dataset);
        if actual != self.dataset_fingerprint {
            return Err(CheckpointError::StaleFingerprint { expected: self.dataset_fingerprint.clone(), actual });
        }
        Ok(())
    }

    pub fn model(&self) -> EvolutionModel {
        EvolutionModel { directed: self.directed, encoder: self.encoder.clone(), params: self.params.clone() }
    }
}
