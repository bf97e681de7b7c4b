//! HTTP front end for a frozen GPDBN model.
//!
//! Three routes: `GET /manifold` returns the precomputed export verbatim,
//! `POST /decode` samples the model at a latent point and `POST /project`
//! finds the latent point that best explains a silhouette. Every request
//! draws from its own generator, seeded from the master seed plus a request
//! counter.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use gpdbn_core::data::{salt_pepper, ssim3, NoiseMode};
use gpdbn_core::evaluation::ManifoldExport;
use gpdbn_core::gp::GpPosterior;
use gpdbn_core::gpdbn::{GpdbnModel, Predictor, ProjectConfig};
use gpdbn_core::numerics::Tensor;
use gpdbn_core::ModelRng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use tower_http::cors::CorsLayer;

/// Samples averaged by `/decode` when the request does not say.
pub const DEFAULT_J: usize = 25;
pub const MAX_J: usize = 500;

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error(transparent)]
    Model(#[from] gpdbn_core::Error),
    #[error("manifold export does not match the model: {0}")]
    Mismatch(String),
    #[error("server: {0}")]
    Io(#[from] std::io::Error),
}

/// Everything a request handler may read. Nothing here changes after
/// construction except the request counter.
pub struct ServeState {
    model: GpdbnModel,
    posterior: GpPosterior,
    manifold_json: Bytes,
    seed: u64,
    counter: AtomicU64,
}

impl ServeState {
    pub fn new(model: GpdbnModel, manifold: &ManifoldExport, seed: u64) -> Result<Self, ServeError> {
        Self::from_json(model, manifold.to_json(), seed)
    }

    /// Builds the state from the export file text, which `/manifold` then
    /// returns byte for byte.
    pub fn from_json(model: GpdbnModel, manifold_json: String, seed: u64) -> Result<Self, ServeError> {
        let manifold = ManifoldExport::from_json(&manifold_json)?;
        if (manifold.width, manifold.height) != (model.width, model.height) {
            return Err(ServeError::Mismatch(format!(
                "export images are {}x{}, model decodes {}x{}",
                manifold.width, manifold.height, model.width, model.height
            )));
        }
        if manifold.latents.len() != model.n() {
            return Err(ServeError::Mismatch(format!(
                "export lists {} training latents, model has {}",
                manifold.latents.len(),
                model.n()
            )));
        }
        let posterior = model.posterior()?;
        Ok(ServeState {
            model,
            posterior,
            manifold_json: Bytes::from(manifold_json),
            seed,
            counter: AtomicU64::new(0),
        })
    }

    pub fn model(&self) -> &GpdbnModel {
        &self.model
    }

    pub fn predictor(&self) -> Predictor<'_> {
        Predictor::with_posterior(&self.model, &self.posterior)
    }

    fn next_rng(&self) -> ModelRng {
        let k = self.counter.fetch_add(1, Ordering::Relaxed);
        ModelRng::seed_from_u64(self.seed.wrapping_add(k))
    }
}

/// Error body: `{"error": {"code": ..., "message": ...}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub code: String,
    pub message: String,
}

#[derive(Debug)]
struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn bad(code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            code,
            message: message.into(),
        }
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            code: "internal",
            message: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: ErrorDetail {
                code: self.code.to_string(),
                message: self.message,
            },
        };
        (self.status, Json(body)).into_response()
    }
}

fn parse<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad("malformed_json", e.to_string()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeRequest {
    pub x: Vec<f64>,
    #[serde(default)]
    pub j: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeResponse {
    pub probs: Vec<f64>,
    pub log_variance: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProjectRequest {
    pub pixels: Vec<f64>,
    #[serde(default)]
    pub noise: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProjectResponse {
    pub x: Vec<f64>,
    pub probs: Vec<f64>,
    pub ssim_vs_input: f64,
}

/// Projection settings used by `/project`: fewer restarts and steps than
/// the command-line default so a request returns quickly.
pub fn serve_project_config() -> ProjectConfig {
    ProjectConfig {
        restarts: 3,
        steps: 100,
        ..ProjectConfig::default()
    }
}

async fn manifold(State(state): State<Arc<ServeState>>) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], state.manifold_json.clone()).into_response()
}

fn decode_blocking(state: &ServeState, req: DecodeRequest) -> Result<DecodeResponse, ApiError> {
    let q = state.model.q();
    if req.x.len() != q {
        return Err(ApiError::bad("bad_dimension", format!("x has {} entries, the latent space has {q}", req.x.len())));
    }
    if req.x.iter().any(|v| !v.is_finite()) {
        return Err(ApiError::bad("non_finite_input", "x must be finite"));
    }
    let j = req.j.unwrap_or(DEFAULT_J);
    if !(1..=MAX_J).contains(&j) {
        return Err(ApiError::bad("bad_sample_count", format!("j must lie in 1..={MAX_J}, got {j}")));
    }
    let pred = state.predictor();
    let x = Tensor::row_vector(req.x);
    let mut rng = state.next_rng();
    let probs = pred.predict_mean(&x, j, &mut rng).map_err(ApiError::internal)?;
    let log_variance = pred.log_variance(&x).map_err(ApiError::internal)?;
    Ok(DecodeResponse {
        probs: probs.into_data(),
        log_variance,
    })
}

fn project_blocking(state: &ServeState, req: ProjectRequest) -> Result<ProjectResponse, ApiError> {
    let model = &state.model;
    let p = model.pixels();
    if req.pixels.len() != p {
        return Err(ApiError::bad("bad_dimension", format!("{} pixels sent, the model decodes {p}", req.pixels.len())));
    }
    if req.pixels.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(ApiError::bad("bad_pixels", "pixels must be 0 or 1"));
    }
    let noise = req.noise.unwrap_or(0.0);
    if !(0.0..=1.0).contains(&noise) {
        return Err(ApiError::bad("bad_noise", format!("noise must lie in [0,1], got {noise}")));
    }
    let input = Tensor::row_vector(req.pixels);
    let mut rng = state.next_rng();
    let target = if noise > 0.0 {
        salt_pepper(&input, noise, NoiseMode::Resample, &mut rng).map_err(ApiError::internal)?
    } else {
        input.clone()
    };
    let proj = match state.predictor().project(&target, &serve_project_config(), &mut rng) {
        Ok(p) => p,
        Err(gpdbn_core::Error::NonFinite { op }) => {
            return Err(ApiError {
                status: StatusCode::UNPROCESSABLE_ENTITY,
                code: "non_finite",
                message: format!("projection produced a non-finite loss ({op})"),
            });
        }
        Err(e) => return Err(ApiError::internal(e)),
    };
    let ssim_vs_input = ssim3(&proj.recon, &input, model.width, model.height).map_err(ApiError::internal)?;
    Ok(ProjectResponse {
        x: proj.x.into_data(),
        probs: proj.recon.into_data(),
        ssim_vs_input,
    })
}

async fn run_blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)?
}

async fn decode(State(state): State<Arc<ServeState>>, body: Bytes) -> Result<Json<DecodeResponse>, ApiError> {
    let req: DecodeRequest = parse(&body)?;
    run_blocking(move || decode_blocking(&state, req)).await.map(Json)
}

async fn project(State(state): State<Arc<ServeState>>, body: Bytes) -> Result<Json<ProjectResponse>, ApiError> {
    let req: ProjectRequest = parse(&body)?;
    run_blocking(move || project_blocking(&state, req)).await.map(Json)
}

pub fn router(state: Arc<ServeState>) -> Router {
    Router::new()
        .route("/manifold", get(manifold))
        .route("/decode", post(decode))
        .route("/project", post(project))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Serves until the process is stopped.
pub async fn run(state: ServeState, addr: SocketAddr) -> Result<(), ServeError> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(state))).await?;
    Ok(())
}
