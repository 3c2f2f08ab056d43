//! Stage-oriented front end: configuration, artifacts and run manifests.

pub mod error;
pub mod layout;
pub mod manifest;
pub mod settings;
pub mod stages;

use std::path::PathBuf;

pub use error::{CliError, Result};
pub use stages::{run_stage, RunContext, Stage};

pub const THREADS_ENV: &str = "TRACE_SEQ_THREADS";

/// Command-line overrides on top of the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub variant: Option<String>,
}

/// Parses a thread count as given in the environment; unset means 1.
pub fn parse_threads(raw: Option<&str>) -> Result<usize> {
    match raw {
        None => Ok(1),
        Some(s) => match s.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::Config(format!("{THREADS_ENV}: `{s}` is not a positive integer"))),
        },
    }
}

pub fn resolve(overrides: &Overrides, threads: usize) -> Result<RunContext> {
    let mut cfg = settings::load_config(overrides.config.as_deref())?;
    if let Some(seed) = overrides.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &overrides.out {
        cfg.output_dir = out.to_string_lossy().into_owned();
    }
    if let Some(v) = &overrides.variant {
        cfg.variant = v.parse().map_err(|e: trace_core::CoreError| CliError::Config(format!("variant: {e}")))?;
    }
    Ok(RunContext::new(cfg, threads))
}
