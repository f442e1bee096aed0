//! Library half of the `ltx` command: config parsing and pipeline stages.

pub mod config;
pub mod pipeline;

pub use config::{ConfigError, ExperimentConfig};
pub use pipeline::{execute, Command, Stage};

/// Process exit code for a failed command: 2 for config errors, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.chain().any(|e| e.is::<ConfigError>()) {
        2
    } else {
        1
    }
}

/// Sizes the global worker pool from `LTX_THREADS` (unset: all cores).
pub fn init_threads() -> Result<(), ConfigError> {
    let Ok(raw) = std::env::var("LTX_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        ConfigError(format!(
            "LTX_THREADS must be a positive integer, got `{raw}`"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| ConfigError(format!("cannot size thread pool: {e}")))
}
