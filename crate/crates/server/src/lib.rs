//! Hidden-label evaluation service.
//!
//! Holds one labeled split in memory and scores submissions against it.
//! Validation is atomic: a submission with any problem is refused as a whole
//! and no metrics are returned.
//!
//! Endpoints:
//! - `POST /v1/submit` takes a [`Submission`] and returns the rounded
//!   [`MetricReport`], or 422 with the offending pair ids.
//! - `GET /v1/health` returns the split, pair count and dataset fingerprint.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cirbench_core::dataset::{fingerprint, DatasetFile};
use cirbench_core::metrics::MetricReport;
use cirbench_core::submission::{score, Rejection, Submission};
use cirbench_core::{Error, Result, Split};
use serde::{Deserialize, Serialize};

/// Default request body limit: 64 MiB.
pub const DEFAULT_BODY_LIMIT: usize = 64 * 1024 * 1024;

/// Immutable gold data shared by every request.
#[derive(Debug)]
pub struct GoldSet {
    file: DatasetFile,
    fingerprint: String,
}

impl GoldSet {
    /// Refuses files with unlabeled records, since they cannot be scored.
    pub fn new(file: DatasetFile) -> Result<Self> {
        file.validate()?;
        let unlabeled = file.records.iter().filter(|r| !r.is_labeled()).count();
        if unlabeled > 0 {
            return Err(Error::Data(format!(
                "gold {} split has {unlabeled} unlabeled records",
                file.split
            )));
        }
        if file.records.is_empty() {
            return Err(Error::Data("gold split is empty".into()));
        }
        let fingerprint = fingerprint(&file)?;
        Ok(GoldSet { file, fingerprint })
    }

    pub fn file(&self) -> &DatasetFile {
        &self.file
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Scores a submission and rounds the report to two decimals.
    pub fn score(&self, sub: &Submission) -> std::result::Result<MetricReport, Rejection> {
        score(sub, &self.file).map(|r| r.rounded())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub split: Split,
    pub pairs: usize,
    pub fingerprint: String,
}

/// Body of every non-200 response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default)]
    pub problems: Vec<String>,
    #[serde(default)]
    pub offending: Vec<String>,
}

impl ErrorBody {
    fn response(status: StatusCode, error: impl Into<String>) -> Response {
        let body = ErrorBody {
            error: error.into(),
            problems: Vec::new(),
            offending: Vec::new(),
        };
        (status, Json(body)).into_response()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ServerConfig {
    pub body_limit: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            body_limit: DEFAULT_BODY_LIMIT,
        }
    }
}

pub fn router(gold: Arc<GoldSet>, cfg: ServerConfig) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/submit", post(submit))
        .layer(DefaultBodyLimit::max(cfg.body_limit))
        .with_state(gold)
}

async fn health(State(gold): State<Arc<GoldSet>>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        split: gold.file.split,
        pairs: gold.file.records.len(),
        fingerprint: gold.fingerprint.clone(),
    })
}

async fn submit(State(gold): State<Arc<GoldSet>>, body: Bytes) -> Response {
    let sub: Submission = match serde_json::from_slice(&body) {
        Ok(s) => s,
        Err(e) => return ErrorBody::response(StatusCode::BAD_REQUEST, format!("malformed submission: {e}")),
    };
    let scored = tokio::task::spawn_blocking(move || gold.score(&sub)).await;
    match scored {
        Ok(Ok(report)) => (StatusCode::OK, Json(report)).into_response(),
        Ok(Err(rejection)) => {
            log::info!("rejected submission: {} problems", rejection.problems.len());
            let body = ErrorBody {
                error: "submission rejected".into(),
                problems: rejection.problems,
                offending: rejection.offending,
            };
            (StatusCode::UNPROCESSABLE_ENTITY, Json(body)).into_response()
        }
        Err(e) => ErrorBody::response(StatusCode::INTERNAL_SERVER_ERROR, format!("scoring failed: {e}")),
    }
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(gold: GoldSet, addr: SocketAddr, cfg: ServerConfig) -> std::io::Result<()> {
    serve_on(tokio::net::TcpListener::bind(addr).await?, gold, cfg).await
}

/// Serves on an already bound listener.
pub async fn serve_on(listener: tokio::net::TcpListener, gold: GoldSet, cfg: ServerConfig) -> std::io::Result<()> {
    log::info!(
        "serving {} split ({} pairs, fingerprint {}) on {}",
        gold.file.split,
        gold.file.records.len(),
        gold.fingerprint,
        listener.local_addr()?
    );
    axum::serve(listener, router(Arc::new(gold), cfg)).await
}
