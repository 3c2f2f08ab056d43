//! Where each stage reads and writes inside the output directory.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use trace_core::autoencoder::EncoderKind;
use trace_core::models::Variant;

use crate::error::{CliError, Result};

pub const COHORT: &str = "cohort.jsonl";
pub const VOCAB: &str = "vocab.json";
pub const MATCHES: &str = "matches.csv";
pub const CODE_TABLE: &str = "codes/table";
pub const PRETRAIN_VOCAB: &str = "codes/pretrain_vocab.json";
pub const ALIGNMENT: &str = "codes/alignment.json";
pub const CODE_LOSS: &str = "codes/loss.csv";

pub fn autoencoder_dir(kind: EncoderKind) -> String {
    format!("autoencoder-{kind}")
}

pub fn model_dir(variant: Variant) -> String {
    format!("models/{variant}")
}

/// The `.json` and `.bin` halves of a checkpoint stem.
pub fn checkpoint_files(stem: &str) -> [String; 2] {
    [format!("{stem}.json"), format!("{stem}.bin")]
}

pub fn manifest_file(stage: &str, qualifier: Option<&str>) -> String {
    match qualifier {
        Some(q) => format!("manifests/{stage}-{q}.json"),
        None => format!("manifests/{stage}.json"),
    }
}

#[derive(Clone, Debug)]
pub struct OutDir {
    pub root: PathBuf,
}

impl OutDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn exists(&self, rel: &str) -> bool {
        self.path(rel).is_file()
    }

    /// Fails with a missing-stage error naming `stage` unless every file exists.
    pub fn require(&self, stage: &str, rels: &[&str]) -> Result<()> {
        for rel in rels {
            if !self.exists(rel) {
                return Err(CliError::missing(stage, format!("{} not found", self.path(rel).display())));
            }
        }
        Ok(())
    }

    pub fn read_string(&self, rel: &str) -> Result<String> {
        let p = self.path(rel);
        std::fs::read_to_string(&p).map_err(|e| CliError::io(p, e))
    }

    pub fn write(&self, rel: &str, bytes: &[u8]) -> Result<()> {
        numkit::checkpoint::write_atomic(&self.path(rel), bytes)?;
        Ok(())
    }

    pub fn sha256(&self, rel: &str) -> Result<String> {
        sha256_file(&self.path(rel))
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}
