//! HTTP service hosting two-party chat rooms whose sessions are separated
//! by simulated time gaps.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::Duration as WallDuration;

pub mod http;
pub mod room;
pub mod store;

pub use http::{router, AppState};
pub use room::{EventKind, Phase, Room, RoomError, RoomEvent, RoomSettings, RoomView};
pub use store::Store;

pub const ENV_DATA_DIR: &str = "CHRONOCHAT_DATA_DIR";
pub const ENV_BIND_ADDR: &str = "CHRONOCHAT_BIND_ADDR";
pub const DEFAULT_BIND_ADDR: &str = "127.0.0.1:8080";
pub const DEFAULT_POLL_WAIT: WallDuration = WallDuration::from_secs(25);

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub bind_addr: SocketAddr,
    /// How long an empty events poll waits before answering.
    pub poll_wait: WallDuration,
}

impl ServiceConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        ServiceConfig {
            data_dir: data_dir.into(),
            bind_addr: DEFAULT_BIND_ADDR.parse().expect("valid default address"),
            poll_wait: DEFAULT_POLL_WAIT,
        }
    }

    pub fn from_env() -> Result<Self, RoomError> {
        let data_dir = std::env::var(ENV_DATA_DIR).unwrap_or_else(|_| "chronochat-data".into());
        let mut config = ServiceConfig::new(data_dir);
        if let Ok(addr) = std::env::var(ENV_BIND_ADDR) {
            config.bind_addr = addr
                .parse()
                .map_err(|e| RoomError::BadConfig(format!("{ENV_BIND_ADDR}={addr}: {e}")))?;
        }
        Ok(config)
    }
}

/// Binds and serves until the process is stopped.
pub async fn serve(config: ServiceConfig) -> Result<(), RoomError> {
    let state = AppState::open(&config)?;
    let listener = tokio::net::TcpListener::bind(config.bind_addr)
        .await
        .map_err(|e| RoomError::Storage(format!("bind {}: {e}", config.bind_addr)))?;
    tracing::info!(addr = %config.bind_addr, "listening");
    axum::serve(listener, router(state))
        .await
        .map_err(|e| RoomError::Storage(e.to_string()))
}
