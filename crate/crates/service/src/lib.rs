//! Job-queue HTTP service for layout edits.
//!
//! | route | |
//! |---|---|
//! | `POST /api/jobs` | multipart submission, `Idempotency-Key` header honored |
//! | `GET /api/jobs/{id}` | job record |
//! | `GET /api/jobs/{id}/events` | server-sent events, or JSON with `?after=N` |
//! | `GET /api/jobs/{id}/result` | edited PNG, 409 until DONE |
//! | `POST /api/jobs/{id}/cancel` | cancel |
//! | `GET /api/health` | liveness and queue counts |

mod http;
mod jobs;
pub mod store;

use std::net::SocketAddr;
use std::sync::Arc;

pub use http::{router, ApiError};
pub use jobs::{
    EventKind, JobConfig, JobEvent, JobService, Recovery, ServiceConfig, SubmitError, Submitted, Upload,
};
use relayout::error::{Error, Result};
use relayout::pipeline::Backends;
pub use store::{JobRecord, JobState, JobStore};

/// Start the workers and serve HTTP on `addr` until the process stops.
pub async fn serve(config: ServiceConfig, backends: Backends, addr: SocketAddr) -> Result<()> {
    let svc = JobService::start(config, backends)?;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::Config(format!("cannot bind {addr}: {e}")))?;
    serve_on(svc, listener).await
}

/// Serve an already started service on a bound listener.
pub async fn serve_on(svc: Arc<JobService>, listener: tokio::net::TcpListener) -> Result<()> {
    log::info!("listening on {}", listener.local_addr().map_err(|e| Error::Config(e.to_string()))?);
    axum::serve(listener, router(svc))
        .await
        .map_err(|e| Error::Config(format!("server stopped: {e}")))
}
