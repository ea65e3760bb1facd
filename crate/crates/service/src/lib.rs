//! Live session service.
//!
//! Clients speak JSON text frames over a WebSocket at `/session`:
//! `{type, session_id, seq, payload}` with types `hello`, `create`, `state`,
//! `action`, `step_result`, `finalize` and `error`. An `action` must carry
//! `seq` equal to the number of steps already taken in its session. In shared
//! mode, a step with no input within `step_timeout_ms` is taken with the idle
//! token `-1`. Episodes are appended to
//! `<episodes_dir>/<YYYY-MM-DD>/<session_id>.jsonl` as they run.

pub mod protocol;
pub mod server;
pub mod session;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use workbench_core::config::{ExperimentConfig, ServiceConfig};

pub use session::{ServiceError, SessionManager};

pub const ENV_ADDR: &str = "WORKBENCH_ADDR";
pub const ENV_PORT: &str = "WORKBENCH_PORT";
pub const ENV_EPISODES_DIR: &str = "WORKBENCH_EPISODES_DIR";
pub const ENV_STEP_TIMEOUT_MS: &str = "WORKBENCH_STEP_TIMEOUT_MS";

/// Applies environment overrides read through `get`.
pub fn apply_env_overrides(cfg: &mut ServiceConfig, get: impl Fn(&str) -> Option<String>) -> Result<(), String> {
    if let Some(v) = get(ENV_ADDR) {
        cfg.addr = v;
    }
    if let Some(v) = get(ENV_PORT) {
        cfg.port = v.parse().map_err(|e| format!("{ENV_PORT}={v}: {e}"))?;
    }
    if let Some(v) = get(ENV_EPISODES_DIR) {
        cfg.episodes_dir = PathBuf::from(v);
    }
    if let Some(v) = get(ENV_STEP_TIMEOUT_MS) {
        let ms: u64 = v.parse().map_err(|e| format!("{ENV_STEP_TIMEOUT_MS}={v}: {e}"))?;
        if ms == 0 {
            return Err(format!("{ENV_STEP_TIMEOUT_MS} must be positive"));
        }
        cfg.step_timeout_ms = ms;
    }
    Ok(())
}

/// Binds the configured address and serves until failure.
pub async fn run(config: ExperimentConfig) -> std::io::Result<()> {
    let addr = format!("{}:{}", config.service.addr, config.service.port);
    let listener = tokio::net::TcpListener::bind(&addr).await?;
    let local: SocketAddr = listener.local_addr()?;
    tracing::info!(%local, episodes = %config.service.episodes_dir.display(), "session service listening");
    server::serve(listener, Arc::new(SessionManager::new(config))).await
}
