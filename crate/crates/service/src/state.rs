use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, RwLock};

use pyramidfill_core::trainer::PyramidModel;
use serde::Serialize;
use tokio::sync::Semaphore;

use crate::config::{ModelSpec, RegistryFile, ServiceConfig};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "detail")]
pub enum LoadState {
    Pending,
    Loading,
    Ready,
    Failed(String),
}

#[derive(Clone, Debug)]
pub struct ModelEntry {
    pub id: String,
    pub checkpoints: PathBuf,
    pub state: LoadState,
    pub model: Option<Arc<PyramidModel>>,
}

/// Listing row of `GET /v1/models`.
#[derive(Clone, Debug, Serialize)]
pub struct ModelInfo {
    pub model_id: String,
    pub checkpoints: String,
    pub levels: Option<usize>,
    pub scale_factor: Option<usize>,
    pub size_multiple: Option<usize>,
    pub full_resolution: Option<usize>,
    pub load_state: LoadState,
}

impl ModelEntry {
    fn info(&self) -> ModelInfo {
        let m = self.model.as_deref();
        ModelInfo {
            model_id: self.id.clone(),
            checkpoints: self.checkpoints.display().to_string(),
            levels: m.map(|m| m.levels()),
            scale_factor: m.map(|m| m.scale_factor),
            size_multiple: m.map(|m| m.size_multiple()),
            full_resolution: m.and_then(|m| m.full_resolution()),
            load_state: self.state.clone(),
        }
    }
}

pub struct AppState {
    pub config: ServiceConfig,
    models: RwLock<Vec<ModelEntry>>,
    ready: AtomicBool,
    pub limiter: Semaphore,
}

impl AppState {
    /// State with every registry entry pending; call [`AppState::load_all`].
    pub fn new(config: ServiceConfig, registry: &RegistryFile) -> Arc<Self> {
        let entries = registry
            .models
            .iter()
            .map(|ModelSpec { id, checkpoints }| ModelEntry {
                id: id.clone(),
                checkpoints: checkpoints.clone(),
                state: LoadState::Pending,
                model: None,
            })
            .collect();
        Arc::new(AppState {
            limiter: Semaphore::new(config.max_concurrency.max(1)),
            config,
            models: RwLock::new(entries),
            ready: AtomicBool::new(false),
        })
    }

    /// Ready state around models that are already in memory.
    pub fn with_models(config: ServiceConfig, models: Vec<PyramidModel>) -> Arc<Self> {
        let entries = models
            .into_iter()
            .map(|m| ModelEntry {
                id: m.model_id.clone(),
                checkpoints: m.root.clone().unwrap_or_default(),
                state: LoadState::Ready,
                model: Some(Arc::new(m)),
            })
            .collect();
        let state = Arc::new(AppState {
            limiter: Semaphore::new(config.max_concurrency.max(1)),
            config,
            models: RwLock::new(entries),
            ready: AtomicBool::new(false),
        });
        state.ready.store(true, Ordering::SeqCst);
        state
    }

    pub fn is_ready(&self) -> bool {
        self.ready.load(Ordering::SeqCst)
    }

    /// Loads every pending model in order. Blocking; readiness is set only if
    /// all of them load.
    pub fn load_all(&self) -> Result<(), String> {
        let pending: Vec<(usize, PathBuf)> = {
            let models = self.models.read().expect("registry lock");
            models
                .iter()
                .enumerate()
                .filter(|(_, e)| e.state != LoadState::Ready)
                .map(|(i, e)| (i, e.checkpoints.clone()))
                .collect()
        };
        for (i, path) in pending {
            self.models.write().expect("registry lock")[i].state = LoadState::Loading;
            let loaded = PyramidModel::load(&path);
            let mut models = self.models.write().expect("registry lock");
            let entry = &mut models[i];
            match loaded {
                Ok(mut m) => {
                    m.model_id = entry.id.clone();
                    log::info!("loaded model {} ({} levels) from {}", entry.id, m.levels(), path.display());
                    entry.model = Some(Arc::new(m));
                    entry.state = LoadState::Ready;
                }
                Err(e) => {
                    let msg = format!("cannot load model {} from {}: {e}", entry.id, path.display());
                    entry.state = LoadState::Failed(msg.clone());
                    return Err(msg);
                }
            }
        }
        self.ready.store(true, Ordering::SeqCst);
        Ok(())
    }

    pub fn list(&self) -> Vec<ModelInfo> {
        self.models.read().expect("registry lock").iter().map(ModelEntry::info).collect()
    }

    /// `None` picks the first registered model.
    pub fn lookup(&self, id: Option<&str>) -> Option<ModelEntry> {
        let models = self.models.read().expect("registry lock");
        match id {
            Some(id) => models.iter().find(|e| e.id == id).cloned(),
            None => models.first().cloned(),
        }
    }
}
