use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::Router;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::oneshot;

use super::{Oracle, SimulatedOracle};
use crate::raster::RasterImage;
use crate::{Error, Result};

pub const API_KEY_HEADER: &str = "X-Api-Key";
pub const API_KEY_ENV: &str = "FACEPASTE_API_KEY";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRequest {
    pub image_png_b64: String,
    pub source_id: i64,
    pub target_id: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub confidence: f64,
    pub stealthiness: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probabilities: Option<Vec<f64>>,
    pub queries_used: u64,
}

struct ServerState {
    oracle: SimulatedOracle,
    query_limit: Option<u64>,
    counters: Mutex<HashMap<String, u64>>,
}

/// A running oracle service; dropping the handle stops it.
pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the server thread exits.
    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    pub fn stop(mut self) {
        self.shutdown_now();
    }

    fn shutdown_now(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.shutdown_now();
    }
}

/// Exposes `oracle` over HTTP (`POST /query`) on `bind`.
///
/// Queries are counted per `X-Api-Key` value; with a `query_limit` the
/// service answers 429 once a key has used it up.
pub fn serve(oracle: SimulatedOracle, bind: &str, query_limit: Option<u64>) -> Result<ServerHandle> {
    let listener = std::net::TcpListener::bind(bind)
        .map_err(|e| Error::Config(format!("cannot bind {bind}: {e}")))?;
    listener
        .set_nonblocking(true)
        .map_err(|e| Error::Config(format!("cannot configure listener: {e}")))?;
    let addr = listener
        .local_addr()
        .map_err(|e| Error::Config(format!("listener address: {e}")))?;
    let state = Arc::new(ServerState {
        oracle,
        query_limit,
        counters: Mutex::new(HashMap::new()),
    });
    let (tx, rx) = oneshot::channel::<()>();
    let runtime = tokio::runtime::Builder::new_current_thread()
        .enable_io()
        .build()
        .map_err(|e| Error::Config(format!("runtime: {e}")))?;
    let thread = std::thread::Builder::new()
        .name("oracle-server".into())
        .spawn(move || {
            runtime.block_on(async move {
                let listener = match tokio::net::TcpListener::from_std(listener) {
                    Ok(l) => l,
                    Err(e) => {
                        log::error!("listener conversion failed: {e}");
                        return;
                    }
                };
                let app = Router::new().route("/query", post(handle_query)).with_state(state);
                let shutdown = async move {
                    let _ = rx.await;
                };
                if let Err(e) = axum::serve(listener, app).with_graceful_shutdown(shutdown).await {
                    log::error!("oracle server stopped: {e}");
                }
            })
        })
        .map_err(|e| Error::Config(format!("cannot spawn server thread: {e}")))?;
    log::info!("oracle service listening on {addr}");
    Ok(ServerHandle {
        addr,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}

fn error_response(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, axum::Json(json!({ "error": msg.into() }))).into_response()
}

async fn handle_query(State(state): State<Arc<ServerState>>, headers: HeaderMap, body: Bytes) -> Response {
    let req: QueryRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, format!("malformed request: {e}")),
    };
    let png = match base64::engine::general_purpose::STANDARD.decode(req.image_png_b64.as_bytes()) {
        Ok(b) => b,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, format!("malformed base64: {e}")),
    };
    let img = match RasterImage::decode_png(&png) {
        Ok(img) => img,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, format!("malformed PNG: {e}")),
    };
    let n = state.oracle.num_classes() as i64;
    if !(0..n).contains(&req.source_id) || !(0..n).contains(&req.target_id) {
        return error_response(StatusCode::NOT_FOUND, format!("class ids must lie in 0..{n}"));
    }
    if req.source_id == req.target_id {
        return error_response(StatusCode::BAD_REQUEST, "source and target class must differ");
    }
    let (w, h, c) = state.oracle.faces().dims();
    if img.dims() != (w, h, c) {
        return error_response(
            StatusCode::BAD_REQUEST,
            format!("image must be {w}x{h} with {c} channels"),
        );
    }

    let key = headers
        .get(API_KEY_HEADER)
        .and_then(|v| v.to_str().ok())
        .unwrap_or("")
        .to_string();
    let used = {
        let mut counters = state.counters.lock().expect("counter lock");
        let used = counters.entry(key).or_insert(0);
        if let Some(limit) = state.query_limit {
            if *used >= limit {
                return (
                    StatusCode::TOO_MANY_REQUESTS,
                    axum::Json(json!({
                        "error": "query budget exhausted",
                        "queries_used": *used,
                        "budget": limit,
                    })),
                )
                    .into_response();
            }
        }
        *used += 1;
        *used
    };

    match state
        .oracle
        .score(&img, req.source_id as usize, req.target_id as usize)
    {
        Ok(scores) => axum::Json(QueryResponse {
            confidence: scores.confidence,
            stealthiness: scores.stealthiness,
            probabilities: scores.probabilities,
            queries_used: used,
        })
        .into_response(),
        Err(e) => error_response(StatusCode::BAD_REQUEST, e.to_string()),
    }
}
