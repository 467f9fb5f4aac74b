//! Prediction service: a victim checkpoint behind HTTP with a sample budget.
//!
//! Endpoints: `GET /v1/health`, `POST /v1/predict`, `GET /v1/stats`. Only
//! probability vectors leave the process.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::net::{SocketAddr, TcpListener};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::oneshot;
use xlab_core::model::Model;
use xlab_core::Tensor;

use crate::error::{Result, XlabError};
use crate::io;

pub const CLIENT_HEADER: &str = "x-client-id";

#[derive(Clone, Debug, PartialEq)]
pub struct ServiceConfig {
    /// `host:port`; port 0 picks a free port.
    pub bind: String,
    pub checkpoint: PathBuf,
    /// Total samples the service will answer; unlimited when `None`.
    pub budget: Option<usize>,
    pub max_batch: usize,
    /// JSON-lines query log.
    pub log: Option<PathBuf>,
}

impl ServiceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_batch == 0 {
            return Err(XlabError::config("max_batch", "must be >= 1"));
        }
        if self.budget == Some(0) {
            return Err(XlabError::config("budget", "must be >= 1 when set"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryLogRecord {
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
    pub batch_size: usize,
    pub cumulative: usize,
    pub client: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub model_name: String,
    pub num_classes: usize,
    pub input_shape: [usize; 3],
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PredictRequest {
    /// One flattened row-major `C×H×W` array per sample.
    pub inputs: Vec<Vec<f32>>,
    pub shape: [usize; 3],
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PredictResponse {
    pub probs: Vec<Vec<f32>>,
    pub queries_used: usize,
    pub budget_remaining: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StatsResponse {
    pub queries_used: usize,
    pub budget_remaining: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
    /// Present on budget refusals.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queries_used: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub kind: String,
    pub message: String,
}

struct Ledger {
    used: usize,
    log: Option<BufWriter<File>>,
}

struct Shared {
    model: Model,
    budget: Option<usize>,
    max_batch: usize,
    ledger: Mutex<Ledger>,
}

impl Shared {
    fn remaining(&self, used: usize) -> Option<usize> {
        self.budget.map(|b| b.saturating_sub(used))
    }

    fn used(&self) -> usize {
        self.ledger.lock().expect("ledger lock").used
    }
}

fn error(status: StatusCode, kind: &str, message: impl Into<String>, used: Option<usize>) -> Response {
    let body = ErrorBody {
        error: ErrorDetail {
            kind: kind.into(),
            message: message.into(),
        },
        queries_used: used,
    };
    (status, Json(body)).into_response()
}

async fn health(State(s): State<Arc<Shared>>) -> Json<HealthResponse> {
    let spec = &s.model.spec;
    Json(HealthResponse {
        status: "ok".into(),
        model_name: spec.name.clone(),
        num_classes: spec.num_classes,
        input_shape: spec.input_shape,
    })
}

async fn stats(State(s): State<Arc<Shared>>) -> Json<StatsResponse> {
    let used = s.used();
    Json(StatsResponse {
        queries_used: used,
        budget_remaining: s.remaining(used),
    })
}

fn exhausted(used: usize, n: usize) -> Response {
    error(
        StatusCode::TOO_MANY_REQUESTS,
        "budget_exhausted",
        format!("query budget exhausted: {used} samples served, {n} more requested"),
        Some(used),
    )
}

async fn predict(State(s): State<Arc<Shared>>, headers: HeaderMap, body: Bytes) -> Response {
    let req: PredictRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, "malformed_request", e.to_string(), None),
    };
    let expected = s.model.spec.input_shape;
    if req.shape != expected {
        return error(
            StatusCode::BAD_REQUEST,
            "shape_mismatch",
            format!("model expects shape {expected:?}, request declares {:?}", req.shape),
            None,
        );
    }
    let n = req.inputs.len();
    if n == 0 {
        return error(StatusCode::BAD_REQUEST, "malformed_request", "empty batch", None);
    }
    if n > s.max_batch {
        return error(
            StatusCode::PAYLOAD_TOO_LARGE,
            "batch_too_large",
            format!("batch of {n} exceeds the limit of {}", s.max_batch),
            None,
        );
    }
    let vol = expected.iter().product::<usize>();
    if let Some(i) = req.inputs.iter().position(|r| r.len() != vol) {
        return error(
            StatusCode::BAD_REQUEST,
            "shape_mismatch",
            format!("row {i} has {} values, expected {vol}", req.inputs[i].len()),
            None,
        );
    }
    if req.inputs.iter().flatten().any(|v| !v.is_finite()) {
        return error(StatusCode::BAD_REQUEST, "malformed_request", "non-finite input", None);
    }
    // Cheap refusal before spending compute; the authoritative check is below.
    {
        let used = s.used();
        if s.budget.is_some_and(|b| used + n > b) {
            return exhausted(used, n);
        }
    }
    let client = headers
        .get(CLIENT_HEADER)
        .and_then(|v| v.to_str().ok())
        .unwrap_or("anonymous")
        .to_string();
    let worker = Arc::clone(&s);
    let probs = tokio::task::spawn_blocking(move || {
        let data: Vec<f32> = req.inputs.into_iter().flatten().collect();
        let x = Tensor::new([n, expected[0], expected[1], expected[2]], data)?;
        worker.model.predict_proba(&x)
    })
    .await;
    let probs = match probs {
        Ok(Ok(p)) => p,
        Ok(Err(e)) => return error(StatusCode::BAD_REQUEST, "malformed_request", e.to_string(), None),
        Err(e) => return error(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string(), None),
    };
    let used = {
        let mut ledger = s.ledger.lock().expect("ledger lock");
        if s.budget.is_some_and(|b| ledger.used + n > b) {
            return exhausted(ledger.used, n);
        }
        ledger.used += n;
        let record = QueryLogRecord {
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0),
            batch_size: n,
            cumulative: ledger.used,
            client,
        };
        if let Some(log) = ledger.log.as_mut() {
            let line = serde_json::to_string(&record).expect("log record serializes");
            // A failing log must not change what the client is charged.
            let _ = writeln!(log, "{line}").and_then(|_| log.flush());
        }
        ledger.used
    };
    let k = s.model.spec.num_classes;
    Json(PredictResponse {
        probs: probs.data().chunks_exact(k).map(<[f32]>::to_vec).collect(),
        queries_used: used,
        budget_remaining: s.remaining(used),
    })
    .into_response()
}

fn router(shared: Arc<Shared>) -> Router {
    let vol = shared.model.spec.input_shape.iter().product::<usize>();
    // Generous allowance for the textual encoding of a maximal batch.
    let limit = (shared.max_batch.saturating_mul(vol).saturating_mul(32)).max(64 * 1024) + 4096;
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/stats", get(stats))
        .route("/v1/predict", post(predict))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(shared)
}

/// A service running on its own thread; stops on [`RunningService::shutdown`]
/// or drop.
pub struct RunningService {
    pub addr: SocketAddr,
    shared: Arc<Shared>,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<std::io::Result<()>>>,
}

impl RunningService {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn queries_used(&self) -> usize {
        self.shared.used()
    }

    pub fn shutdown(mut self) -> Result<()> {
        self.stop_and_join()
    }

    fn stop_and_join(&mut self) -> Result<()> {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        if let Some(t) = self.thread.take() {
            match t.join() {
                Ok(r) => r.map_err(|e| XlabError::Service(e.to_string()))?,
                Err(_) => return Err(XlabError::Service("service thread panicked".into())),
            }
        }
        if let Some(log) = self.shared.ledger.lock().expect("ledger lock").log.as_mut() {
            let _ = log.flush();
        }
        Ok(())
    }
}

impl Drop for RunningService {
    fn drop(&mut self) {
        let _ = self.stop_and_join();
    }
}

/// Loads the configured checkpoint and serves it.
pub fn spawn(config: &ServiceConfig) -> Result<RunningService> {
    let model = io::load_model(&config.checkpoint)?;
    spawn_model(model, config)
}

/// Serves an in-memory model; `config.checkpoint` is not read.
pub fn spawn_model(model: Model, config: &ServiceConfig) -> Result<RunningService> {
    config.validate()?;
    let log = match &config.log {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| XlabError::io(dir, e))?;
            }
            let f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| XlabError::io(path, e))?;
            Some(BufWriter::new(f))
        }
        None => None,
    };
    let listener = TcpListener::bind(&config.bind)
        .map_err(|e| XlabError::Service(format!("cannot bind {}: {e}", config.bind)))?;
    listener
        .set_nonblocking(true)
        .map_err(|e| XlabError::Service(e.to_string()))?;
    let addr = listener
        .local_addr()
        .map_err(|e| XlabError::Service(e.to_string()))?;
    let shared = Arc::new(Shared {
        model,
        budget: config.budget,
        max_batch: config.max_batch,
        ledger: Mutex::new(Ledger { used: 0, log }),
    });
    let app = router(Arc::clone(&shared));
    let (stop, stopped) = oneshot::channel::<()>();
    let thread = std::thread::Builder::new()
        .name(format!("xlab-service-{}", addr.port()))
        .spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread()
                .worker_threads(2)
                .enable_io()
                .build()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener)?;
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = stopped.await;
                    })
                    .await
            })
        })
        .map_err(|e| XlabError::Service(e.to_string()))?;
    Ok(RunningService {
        addr,
        shared,
        stop: Some(stop),
        thread: Some(thread),
    })
}

/// Serves until Ctrl-C. Prints the bound address on stdout first.
pub fn serve_blocking(config: &ServiceConfig) -> Result<()> {
    let service = spawn(config)?;
    println!("{}", serde_json::json!({ "listening": service.url() }));
    let rt = tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .map_err(|e| XlabError::Service(e.to_string()))?;
    rt.block_on(tokio::signal::ctrl_c())
        .map_err(|e| XlabError::Service(e.to_string()))?;
    service.shutdown()
}
