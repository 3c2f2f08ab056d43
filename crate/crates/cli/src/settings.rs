//! Loading, overriding and fingerprinting experiment configurations.

use std::path::Path;

use sha2::{Digest, Sha256};
use trace_core::config::ExperimentConfig;

use crate::error::{CliError, Result};

/// Parses a TOML document; errors carry the dotted path of the bad field.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let de = toml::Deserializer::parse(text).map_err(|e| CliError::Config(e.to_string()))?;
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::Config(format!("{path}: {}", e.inner().message().trim()))
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads `path`, or returns the defaults when no file is given.
pub fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            parse_config(&text)
        }
        None => Ok(ExperimentConfig::default()),
    }
}

/// SHA-256 of the normalized config. The output directory is left out so
/// the same experiment hashes the same wherever it is written.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let mut c = cfg.clone();
    c.output_dir = String::new();
    let json = serde_json::to_vec(&c).expect("config serializes");
    hex::encode(Sha256::digest(json))
}

pub fn to_toml(cfg: &ExperimentConfig) -> String {
    toml::to_string_pretty(cfg).expect("config serializes")
}
