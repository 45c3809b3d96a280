//! Configuration, ensemble orchestration and persistence for the experiments.

mod config;
mod experiments;
mod manifest;

pub use config::{
    DiffusionConfig, EnsembleConfig, ExperimentConfig, ExperimentKind, FrameConfig, GridConfig, IntegrationConfig,
    PhysicsConfig,
};
pub use experiments::*;
pub use manifest::{RunManifest, SeedRecord, MANIFEST_NAME};

use crate::error::{Error, Result};

/// Environment variable read when no explicit thread count is given.
pub const THREADS_ENV: &str = "SKDV_THREADS";

/// Thread count from the flag, else `SKDV_THREADS`, else the number of CPUs.
pub fn resolve_threads(flag: Option<usize>) -> Result<usize> {
    if let Some(n) = flag {
        return if n > 0 { Ok(n) } else { Err(Error::Config("--threads must be at least 1".into())) };
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Run `f` inside a rayon pool of `threads` workers.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    Ok(pool.install(f))
}
