//! HTTP inpainting service for trained PyramidFill checkpoints.
//!
//! Endpoints: `GET /v1/health`, `GET /v1/models`, `POST /v1/inpaint`.
//! Every response body is JSON carrying `schema_version`.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod routes;
pub mod state;

use std::future::Future;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use tokio::net::TcpListener;

pub use config::{ModelSpec, RegistryFile, ServiceConfig};
pub use error::ApiError;
pub use routes::{router, InpaintRequest};
pub use state::{AppState, LoadState};

pub const SCHEMA_VERSION: &str = "1";

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("model loading failed: {0}")]
    Load(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Reads the registry, binds the port and serves until Ctrl-C or SIGTERM.
pub async fn serve(config: ServiceConfig) -> Result<(), ServiceError> {
    let registry = match &config.registry_path {
        Some(p) => RegistryFile::load(p).map_err(ServiceError::Config)?,
        None => RegistryFile::default(),
    };
    let addr = SocketAddr::from(([0, 0, 0, 0], config.port));
    let listener = TcpListener::bind(addr).await?;
    log::info!("listening on {addr} with {} registered models", registry.models.len());
    let state = AppState::new(config, &registry);
    run(listener, state, shutdown_signal()).await
}

/// Serves `state` on `listener` while its models load in the background.
/// Returns an error after shutting down if any model fails to load.
pub async fn run(
    listener: TcpListener,
    state: Arc<AppState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), ServiceError> {
    let failure: Arc<Mutex<Option<String>>> = Arc::new(Mutex::new(None));
    let (fail_tx, fail_rx) = tokio::sync::oneshot::channel::<()>();
    {
        let state = state.clone();
        let failure = failure.clone();
        tokio::spawn(async move {
            let loaded = tokio::task::spawn_blocking(move || state.load_all()).await;
            let err = match loaded {
                Ok(Ok(())) => return,
                Ok(Err(e)) => e,
                Err(e) => e.to_string(),
            };
            log::error!("{err}");
            *failure.lock().expect("failure slot") = Some(err);
            let _ = fail_tx.send(());
        });
    }
    let stop = async move {
        tokio::select! {
            _ = shutdown => {}
            Ok(()) = fail_rx => {}
        }
    };
    axum::serve(listener, router(state)).with_graceful_shutdown(stop).await?;
    let failed = failure.lock().expect("failure slot").take();
    match failed {
        Some(e) => Err(ServiceError::Load(e)),
        None => Ok(()),
    }
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
    log::info!("shutting down");
}
