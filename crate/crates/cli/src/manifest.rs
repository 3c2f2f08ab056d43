//! Run manifests: one JSON document per stage run, linked to the runs that
//! produced its inputs.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub stage: String,
    pub variant: Option<String>,
    pub config_sha256: String,
    pub seed: u64,
    /// Paths relative to the output directory.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    /// Stage name → `run_sha256` of the run that produced an input.
    pub parents: BTreeMap<String, String>,
    /// Digest of everything above; timing is not part of it.
    pub run_sha256: String,
    pub wall_clock_seconds: f64,
}

impl RunManifest {
    pub fn compute_run_hash(&self) -> String {
        let mut h = Sha256::new();
        let mut field = |s: &str| {
            h.update(s.as_bytes());
            h.update([0u8]);
        };
        field(&self.stage);
        field(self.variant.as_deref().unwrap_or(""));
        field(&self.config_sha256);
        field(&self.seed.to_string());
        for map in [&self.inputs, &self.outputs, &self.parents] {
            field("|");
            for (k, v) in map {
                field(k);
                field(v);
            }
        }
        hex::encode(h.finalize())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Ok(serde_json::from_slice(&text)?)
    }
}
