//! Tensor containers, pruning runs, reports, fixtures and the permutation
//! benchmark behind the `permnm` command line.

mod bench;
mod container;
mod fixture;
mod run;

pub use bench::{cli_bench_permutation, BenchReport};
pub use container::{
    load_calibration, load_model, save_calibration, save_model, LayerEntry, Manifest, TensorContainer,
    TensorEntry, Topology, CALIBRATION_TENSOR, MODEL_INPUT,
};
pub use fixture::{generate_fixture, FixtureKind, DEFAULT_CALIBRATION_SAMPLES, FIG1_MAX_ATTEMPTS};
pub use run::{
    cli_compare, cli_prune, LayerReport, ModelLosses, Precision, PruneArtifacts, Report,
    RunConfig, REPORT_VERSION,
};

use crate::error::{Error, Result};

/// Environment variable bounding worker threads.
pub const THREADS_ENV: &str = "PERMNM_THREADS";

/// Runs `f` on a rayon pool sized by `PERMNM_THREADS` (all cores when unset).
pub fn with_thread_pool<R: Send>(f: impl FnOnce() -> R + Send) -> Result<R> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?,
        Err(_) => 0,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}
