//! HTTP inference service.
//!
//! Routes (all JSON):
//!
//! | method | path                   | purpose                                   |
//! |--------|------------------------|-------------------------------------------|
//! | GET    | `/healthz`             | liveness and whether a model is loaded    |
//! | GET    | `/v1/categories`       | vocabulary and display palette            |
//! | GET    | `/v1/model`            | resolution, checkpoint hash, config       |
//! | POST   | `/v1/generate`         | layout (+ optional style) → PNG           |
//! | POST   | `/v1/restyle`          | resample chosen object codes              |
//! | POST   | `/v1/interpolate`      | frames between two codes of one object    |
//! | POST   | `/v1/debug/affine_maps`| per-site recalibration maps               |
//!
//! Errors are `{"error": {"kind", "message"}}` with status 400 for invalid
//! input and 409 before a model is loaded.

pub mod codec;
pub mod error;
mod routes;

use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::AtomicU64;
use std::sync::Arc;

use lostgan_core::generator::Generator;
use lostgan_core::training::{load_generator, CheckpointMeta};
use lostgan_core::{CategorySet, LayoutLimits};
use tokio::sync::Semaphore;

pub use codec::StyleWire;
pub use error::ApiError;
pub use routes::router;

pub const API_VERSION: u32 = 1;

/// A loaded generator with its vocabulary and checkpoint metadata.
pub struct Model {
    pub generator: Generator,
    pub categories: CategorySet,
    pub meta: CheckpointMeta,
    pub limits: LayoutLimits,
}

impl Model {
    pub fn new(generator: Generator, categories: CategorySet, meta: CheckpointMeta) -> Self {
        Self {
            generator,
            categories,
            meta,
            limits: LayoutLimits::default(),
        }
    }

    pub fn load(dir: impl AsRef<Path>) -> lostgan_core::Result<Self> {
        let (generator, categories, meta) = load_generator(dir)?;
        Ok(Self::new(generator, categories, meta))
    }
}

#[derive(Clone)]
pub struct AppState {
    pub model: Option<Arc<Model>>,
    /// Bounds concurrent generations; the CPU backend is single-stream.
    pub permits: Arc<Semaphore>,
    /// Mixed into fresh seeds so that seedless requests differ.
    pub seed_counter: Arc<AtomicU64>,
}

impl AppState {
    pub fn new(model: Option<Model>) -> Self {
        Self {
            model: model.map(Arc::new),
            permits: Arc::new(Semaphore::new(1)),
            seed_counter: Arc::new(AtomicU64::new(0)),
        }
    }
}

/// Serves until the process is stopped. The checkpoint is loaded once at
/// startup; without one every model route answers 409.
pub async fn serve(addr: SocketAddr, checkpoint: Option<&Path>) -> std::io::Result<()> {
    let model = match checkpoint {
        Some(p) => Some(Model::load(p).map_err(|e| std::io::Error::other(e.to_string()))?),
        None => None,
    };
    if let Some(m) = &model {
        log::info!(
            "loaded checkpoint step {} ({}x{}, {} categories)",
            m.meta.step,
            m.generator.config().output_side(),
            m.generator.config().output_side(),
            m.categories.len()
        );
    }
    let app = router(AppState::new(model));
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, app).await
}
