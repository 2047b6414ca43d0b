//! HTTP front end for layout generation.
//!
//! Routes:
//!
//! - `POST /v1/generate`: decode one request and return the finished layout.
//! - `POST /v1/generate/stream`, or `GET /v1/generate/stream?request=<json>`:
//!   the same request as server-sent events, one per denoising step, then a
//!   terminal `{"done": true, ...}` or `{"error": ...}` event.
//! - `GET /v1/health`: `{status, model_version, uptime_s}`, 503 until a model is loaded.
//!
//! Decodes run on blocking threads behind a bounded admission queue.

mod error;
mod generate;

use std::convert::Infallible;
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::rejection::QueryRejection;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::{mpsc, OwnedSemaphorePermit, Semaphore};

use ldgm_core::denoiser::{Checkpoint, Denoiser};
use ldgm_core::diffusion::StackSet;
use ldgm_core::layout::{QuantizerConfig, Vocabulary};
use ldgm_core::training::TrainConfig;
use ldgm_core::{Error, Result};

pub use error::ApiError;
pub use generate::{parse_job, run_job, Job, MAX_STEPS};

/// A checkpoint prepared for serving. Immutable once built.
#[derive(Debug)]
pub struct LoadedModel {
    denoiser: Denoiser<f32>,
    stacks: StackSet,
    quant: QuantizerConfig,
    vocab: Vocabulary,
    /// Whether responses name categories; without a vocabulary they are ids.
    named: bool,
    n_max: usize,
    version: String,
}

impl LoadedModel {
    /// `vocab` names the category ids; without one, names are `"0"`, `"1"`, ...
    pub fn new(ckpt: Checkpoint, vocab: Option<Vocabulary>) -> Result<Self> {
        let value = ckpt
            .train_config
            .as_ref()
            .ok_or_else(|| Error::IncompatibleCheckpoint("checkpoint carries no training configuration".into()))?;
        let cfg = TrainConfig::from_value(value)?;
        let version = match ckpt.model_version.as_str() {
            "" => Checkpoint::from_bytes(&ckpt.to_bytes()?)?.model_version,
            v => v.to_string(),
        };
        let quant = cfg.quantizer()?;
        let named = vocab.is_some();
        let vocab = vocab.unwrap_or_else(|| Vocabulary::numbered(quant.k_category as usize));
        if vocab.len() != quant.k_category as usize {
            return Err(Error::IncompatibleCheckpoint(format!(
                "vocabulary has {} categories, the model {}",
                vocab.len(),
                quant.k_category
            )));
        }
        Ok(Self {
            stacks: cfg.stacks()?,
            denoiser: ckpt.model,
            quant,
            vocab,
            named,
            n_max: cfg.n_max,
            version,
        })
    }

    pub fn denoiser(&self) -> &Denoiser<f32> {
        &self.denoiser
    }

    pub fn stacks(&self) -> &StackSet {
        &self.stacks
    }

    pub fn quantizer(&self) -> &QuantizerConfig {
        &self.quant
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Vocabulary used to name categories in responses.
    pub fn output_names(&self) -> Option<&Vocabulary> {
        self.named.then_some(&self.vocab)
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn t_max(&self) -> usize {
        self.stacks.t_max()
    }

    /// Hash of the checkpoint manifest.
    pub fn version(&self) -> &str {
        &self.version
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ServiceConfig {
    /// Decodes running at once.
    pub workers: usize,
    /// Requests allowed to wait for a worker before new ones get 429.
    pub queue: usize,
    pub timeout: Duration,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
        Self { workers, queue: 4 * workers, timeout: Duration::from_secs(30) }
    }
}

struct Inner {
    model: OnceLock<Arc<LoadedModel>>,
    started: Instant,
    admission: Arc<Semaphore>,
    workers: Arc<Semaphore>,
    timeout: Duration,
}

/// Shared handle to the service; cheap to clone.
#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    /// A service with no model yet: generation and health answer 503.
    pub fn new(cfg: ServiceConfig) -> Self {
        let workers = cfg.workers.max(1);
        Self(Arc::new(Inner {
            model: OnceLock::new(),
            started: Instant::now(),
            admission: Arc::new(Semaphore::new(workers + cfg.queue)),
            workers: Arc::new(Semaphore::new(workers)),
            timeout: cfg.timeout,
        }))
    }

    pub fn with_model(cfg: ServiceConfig, model: LoadedModel) -> Self {
        let s = Self::new(cfg);
        s.load(model).expect("fresh state has no model");
        s
    }

    /// Install the model. Only the first call succeeds.
    pub fn load(&self, model: LoadedModel) -> std::result::Result<(), LoadedModel> {
        self.0
            .model
            .set(Arc::new(model))
            .map_err(|m| Arc::try_unwrap(m).expect("rejected model is not shared"))
    }

    pub fn model(&self) -> Option<Arc<LoadedModel>> {
        self.0.model.get().cloned()
    }

    fn ready(&self) -> std::result::Result<Arc<LoadedModel>, ApiError> {
        self.model().ok_or_else(ApiError::not_loaded)
    }

    fn admit(&self) -> std::result::Result<OwnedSemaphorePermit, ApiError> {
        self.0.admission.clone().try_acquire_owned().map_err(|_| ApiError::overloaded())
    }

    async fn worker(&self) -> OwnedSemaphorePermit {
        self.0.workers.clone().acquire_owned().await.expect("worker semaphore is never closed")
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/generate", post(generate))
        .route("/v1/generate/stream", post(stream_post).get(stream_get))
        .fallback(not_found)
        .with_state(state)
}

/// Serve on `listener` until the process ends.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route")
}

async fn health(State(state): State<AppState>) -> Response {
    let uptime_s = state.0.started.elapsed().as_secs_f64();
    match state.model() {
        Some(m) => Json(json!({"status": "ok", "model_version": m.version(), "uptime_s": uptime_s})).into_response(),
        None => (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(json!({"status": "unavailable", "model_version": null, "uptime_s": uptime_s})),
        )
            .into_response(),
    }
}

fn parse_body(bytes: &[u8]) -> std::result::Result<Value, ApiError> {
    serde_json::from_slice(bytes).map_err(|e| ApiError::schema("$", format!("invalid JSON: {e}")))
}

async fn generate(State(state): State<AppState>, body: Bytes) -> std::result::Result<Json<Value>, ApiError> {
    let model = state.ready()?;
    let job = parse_job(&parse_body(&body)?, &model)?;
    let admitted = state.admit()?;
    let work = async {
        let worker = state.worker().await;
        let model = model.clone();
        tokio::task::spawn_blocking(move || {
            let _permits = (admitted, worker);
            let start = Instant::now();
            let (out, traj) = run_job(&job, &model, &mut |_| {})?;
            let ms = start.elapsed().as_secs_f64() * 1e3;
            generate::response_json(&job, &out, &traj, ms, &model)
        })
        .await
        .map_err(|e| ApiError::internal(format!("decode worker failed: {e}")))?
    };
    match tokio::time::timeout(state.0.timeout, work).await {
        Ok(r) => r.map(Json),
        Err(_) => Err(ApiError::timeout()),
    }
}

#[derive(Debug, Deserialize)]
struct StreamQuery {
    request: String,
}

async fn stream_get(
    State(state): State<AppState>,
    query: std::result::Result<Query<StreamQuery>, QueryRejection>,
) -> Response {
    match query {
        Ok(Query(q)) => stream_response(state, q.request.as_bytes()),
        Err(e) => ApiError::schema("$", format!("expected a `request` query parameter: {e}")).into_response(),
    }
}

async fn stream_post(State(state): State<AppState>, body: Bytes) -> Response {
    stream_response(state, &body)
}

fn event(v: Value) -> std::result::Result<Event, Infallible> {
    Ok(Event::default().data(v.to_string()))
}

fn error_event(e: &ApiError) -> Value {
    e.body()
}

fn stream_response(state: AppState, body: &[u8]) -> Response {
    let setup = || -> std::result::Result<_, ApiError> {
        let model = state.ready()?;
        let job = parse_job(&parse_body(body)?, &model)?;
        Ok((model, job, state.admit()?))
    };
    let (model, job, admitted) = match setup() {
        Ok(s) => s,
        Err(e) => return e.into_response(),
    };
    let (tx, rx) = mpsc::unbounded_channel::<Value>();
    let deadline = tokio::time::Instant::now() + state.0.timeout;
    tokio::spawn(async move {
        let worker = state.worker().await;
        let err_tx = tx.clone();
        let joined = tokio::task::spawn_blocking(move || {
            let _permits = (admitted, worker);
            let start = Instant::now();
            let emit = |s: &ldgm_core::inference::TrajectoryStep| {
                let _ = tx.send(generate::step_json(s, &model));
            };
            let last = run_job(&job, &model, &mut { emit }).and_then(|(out, _)| {
                let mut fields = generate::result_fields(&job, &out, &model)?;
                fields.insert("done".into(), json!(true));
                fields.insert("timing_ms".into(), json!(start.elapsed().as_secs_f64() * 1e3));
                Ok(Value::Object(fields))
            });
            let _ = tx.send(last.unwrap_or_else(|e| error_event(&e)));
        })
        .await;
        if let Err(e) = joined {
            let _ = err_tx.send(error_event(&ApiError::internal(format!("decode worker failed: {e}"))));
        }
    });
    Sse::new(event_stream(rx, deadline)).keep_alive(KeepAlive::default()).into_response()
}

/// Forward decode events until a terminal one, or a timeout error at `deadline`.
fn event_stream(
    rx: mpsc::UnboundedReceiver<Value>,
    deadline: tokio::time::Instant,
) -> impl Stream<Item = std::result::Result<Event, Infallible>> {
    stream::unfold(Some(rx), move |rx| async move {
        let mut rx = rx?;
        let next = match tokio::time::timeout_at(deadline, rx.recv()).await {
            Ok(Some(v)) => v,
            Ok(None) => error_event(&ApiError::internal("decode ended without a result")),
            Err(_) => error_event(&ApiError::timeout()),
        };
        let terminal = next.get("done").is_some() || next.get("error").is_some();
        Some((event(next), (!terminal).then_some(rx)))
    })
}
