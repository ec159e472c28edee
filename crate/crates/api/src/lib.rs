//! Read-only JSON service over a trained model's four-stage forecast.
//!
//! State is built once (dataset, checkpoint, precomputed rollout) and then shared
//! without locking. Until it is installed every `/api` route answers 503.

use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use axum::extract::{Path, Query, State};
use axum::http::{Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use evolvex_core::graphgen::{Adjacency, TemporalDataset, CATEGORY_COUNT};
use evolvex_core::model::{Checkpoint, CheckpointError};
use evolvex_core::predict::{rank_candidates, rollout, EvolutionForecast, PredictError, MAX_HORIZON};
use serde::{Deserialize, Serialize};
use tower_http::cors::{Any, CorsLayer};
use tower_http::services::ServeDir;

/// Suggestions returned per request.
pub const SUGGESTION_COUNT: usize = 10;

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Predict(#[from] PredictError),
}

/// Everything the endpoints read. Immutable once built.
#[derive(Debug)]
pub struct ServeState {
    pub dataset: TemporalDataset,
    pub forecast: EvolutionForecast,
    /// `graphs[s - 1]` is the observed graph plus every edge predicted before stage `s`.
    graphs: Vec<Adjacency>,
}

impl ServeState {
    /// Verifies the checkpoint against `dataset` and rolls the model out over all four stages,
    /// conditioning on every observed step.
    pub fn new(dataset: TemporalDataset, checkpoint: &Checkpoint) -> Result<Self, ServeError> {
        checkpoint.verify_dataset(&dataset)?;
        let forecast = rollout(&checkpoint.model(), &dataset, MAX_HORIZON)?;
        let mut graphs = Vec::with_capacity(MAX_HORIZON);
        let mut current = dataset.last().adjacency.clone();
        for stage in &forecast.stages {
            graphs.push(current.clone());
            for (i, j) in stage.predicted_edges.edges() {
                current.insert(i, j);
            }
        }
        Ok(Self { dataset, forecast, graphs })
    }

    /// Graph a stage's suggestions are filtered against.
    pub fn cumulative_graph(&self, stage: usize) -> &Adjacency {
        &self.graphs[stage - 1]
    }

    fn country(&self, user: usize) -> &str {
        &self.dataset.vocabularies.locations[self.dataset.profiles[user].location]
    }

    pub fn suggestions(&self, user: usize, stage: usize) -> Result<Vec<Suggestion>, PredictError> {
        let probs = &self.forecast.stages[stage - 1].edge_probs;
        let ranked = rank_candidates(user, probs, Some(self.cumulative_graph(stage)), SUGGESTION_COUNT)?;
        Ok(ranked
            .into_iter()
            .map(|id| Suggestion { id, confidence: probs[[user, id]], country: self.country(id).to_string() })
            .collect())
    }
}

/// Shared handle; empty until [`AppHandle::install`] is called.
#[derive(Clone, Debug, Default)]
pub struct AppHandle(Arc<OnceLock<ServeState>>);

impl AppHandle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn ready(state: ServeState) -> Self {
        let handle = Self::new();
        handle.install(state);
        handle
    }

    /// Installs the state. Later calls are ignored.
    pub fn install(&self, state: ServeState) {
        let _ = self.0.set(state);
    }

    fn get(&self) -> Result<&ServeState, ApiError> {
        self.0.get().ok_or(ApiError::NotReady)
    }
}

#[derive(Debug)]
enum ApiError {
    NotReady,
    UnknownUser(String),
    BadStage(String),
    Internal(String),
}

#[derive(Serialize)]
struct ErrorBody {
    error: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, error) = match self {
            ApiError::NotReady => (StatusCode::SERVICE_UNAVAILABLE, "forecast state is still loading".to_string()),
            ApiError::UnknownUser(id) => (StatusCode::NOT_FOUND, format!("unknown user {id}")),
            ApiError::BadStage(s) => (StatusCode::BAD_REQUEST, format!("stage must be an integer in 1..={MAX_HORIZON}, got {s}")),
            ApiError::Internal(e) => (StatusCode::INTERNAL_SERVER_ERROR, e),
        };
        (status, Json(ErrorBody { error })).into_response()
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct UserSummary {
    pub id: usize,
    pub age: u32,
    pub gender: String,
    pub occupation: String,
    pub country: String,
    pub connections: usize,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct Suggestion {
    pub id: usize,
    pub confidence: f64,
    pub country: String,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct SuggestionsResponse {
    pub user: usize,
    pub stage: usize,
    pub suggestions: Vec<Suggestion>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct MapResponse {
    pub user: usize,
    pub stage: usize,
    pub country: String,
    /// `[user, country]`
    pub current: Vec<(usize, String)>,
    /// `[user, country, confidence]`
    pub predicted: Vec<(usize, String, f64)>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct HistoryPoint {
    pub step: usize,
    pub counts: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct PredictedActivity {
    pub stage: usize,
    pub step: usize,
    pub probabilities: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ActivitiesResponse {
    pub user: usize,
    pub categories: Vec<String>,
    pub history: Vec<HistoryPoint>,
    pub predicted: Vec<PredictedActivity>,
}

#[derive(Deserialize)]
struct StageQuery {
    stage: Option<String>,
}

fn parse_user(state: &ServeState, raw: &str) -> Result<usize, ApiError> {
    raw.parse::<usize>()
        .ok()
        .filter(|&u| u < state.dataset.user_count())
        .ok_or_else(|| ApiError::UnknownUser(raw.to_string()))
}

fn parse_stage(q: &StageQuery) -> Result<usize, ApiError> {
    match q.stage.as_deref() {
        None => Ok(1),
        Some(s) => s
            .parse::<usize>()
            .ok()
            .filter(|v| (1..=MAX_HORIZON).contains(v))
            .ok_or_else(|| ApiError::BadStage(s.to_string())),
    }
}

async fn users(State(app): State<AppHandle>) -> Result<Json<Vec<UserSummary>>, ApiError> {
    let st = app.get()?;
    let ds = &st.dataset;
    let adj = &ds.last().adjacency;
    let v = &ds.vocabularies;
    Ok(Json(
        ds.profiles
            .iter()
            .enumerate()
            .map(|(id, p)| UserSummary {
                id,
                age: p.age,
                gender: v.genders[p.gender].clone(),
                occupation: v.occupations[p.occupation].clone(),
                country: v.locations[p.location].clone(),
                connections: adj.degree(id),
            })
            .collect(),
    ))
}

async fn suggestions(
    State(app): State<AppHandle>,
    Path(id): Path<String>,
    Query(q): Query<StageQuery>,
) -> Result<Json<SuggestionsResponse>, ApiError> {
    let st = app.get()?;
    let user = parse_user(st, &id)?;
    let stage = parse_stage(&q)?;
    let suggestions = st.suggestions(user, stage).map_err(|e| ApiError::Internal(e.to_string()))?;
    Ok(Json(SuggestionsResponse { user, stage, suggestions }))
}

async fn map(
    State(app): State<AppHandle>,
    Path(id): Path<String>,
    Query(q): Query<StageQuery>,
) -> Result<Json<MapResponse>, ApiError> {
    let st = app.get()?;
    let user = parse_user(st, &id)?;
    let stage = parse_stage(&q)?;
    let current = st.dataset.last().adjacency.neighbors(user).map(|v| (v, st.country(v).to_string())).collect();
    let predicted = st
        .suggestions(user, stage)
        .map_err(|e| ApiError::Internal(e.to_string()))?
        .into_iter()
        .map(|s| (s.id, s.country, s.confidence))
        .collect();
    Ok(Json(MapResponse { user, stage, country: st.country(user).to_string(), current, predicted }))
}

async fn activities(State(app): State<AppHandle>, Path(id): Path<String>) -> Result<Json<ActivitiesResponse>, ApiError> {
    let st = app.get()?;
    let user = parse_user(st, &id)?;
    let ds = &st.dataset;
    let history = ds
        .snapshots
        .iter()
        .map(|s| HistoryPoint { step: s.step, counts: s.category_counts(user).to_vec() })
        .collect();
    let last = ds.last().step;
    let predicted = st
        .forecast
        .stages
        .iter()
        .map(|s| PredictedActivity {
            stage: s.stage,
            step: last + s.stage,
            probabilities: (0..CATEGORY_COUNT).map(|c| s.activity_probs[[user, c]]).collect(),
        })
        .collect();
    Ok(Json(ActivitiesResponse { user, categories: ds.vocabularies.categories.clone(), history, predicted }))
}

/// All `/api` routes with permissive GET-only CORS. When `static_dir` is set, other paths
/// are served from it.
pub fn router(app: AppHandle, static_dir: Option<PathBuf>) -> Router {
    let cors = CorsLayer::new().allow_origin(Any).allow_methods([Method::GET]);
    let api = Router::new()
        .route("/api/users", get(users))
        .route("/api/users/{id}/suggestions", get(suggestions))
        .route("/api/users/{id}/map", get(map))
        .route("/api/users/{id}/activities", get(activities))
        .with_state(app);
    let api = match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    };
    api.layer(cors)
}
