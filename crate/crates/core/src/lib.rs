//! Temporal social-graph simulation, multimodal user embeddings and evolution forecasting.

pub mod embed;
pub mod fusion;
pub mod graphgen;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod predict;
pub mod promptgen;
pub mod train;
