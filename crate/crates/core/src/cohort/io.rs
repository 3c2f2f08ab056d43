//! Cohort persistence: JSON-lines records behind a header, and the match
//! table as CSV.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, MatchRow, Split};
use crate::ehr::{RawPatient, Vocabularies};
use crate::error::{CoreError, Result};

pub const COHORT_FORMAT: &str = "cohort-jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortHeader {
    pub format: String,
    pub version: u32,
    pub generator_seed: u64,
    pub split_seed: u64,
    pub n_patients: usize,
    pub code_vocab_sha256: String,
    pub observation_vocab_sha256: String,
}

#[derive(Serialize, Deserialize)]
struct Line {
    split: Split,
    #[serde(flatten)]
    patient: RawPatient,
}

pub fn write_cohort_jsonl(cohort: &Cohort, vocabs: &Vocabularies) -> Result<String> {
    let header = CohortHeader {
        format: COHORT_FORMAT.into(),
        version: 1,
        generator_seed: cohort.generator_seed,
        split_seed: cohort.split_seed,
        n_patients: cohort.patients.len(),
        code_vocab_sha256: vocabs.code_hash(),
        observation_vocab_sha256: vocabs.observation_hash(),
    };
    let mut out = serde_json::to_string(&header)?;
    out.push('\n');
    for p in &cohort.patients {
        let split = cohort
            .split_of(p.id)
            .ok_or_else(|| CoreError::Data(format!("patient {} has no split", p.id)))?;
        out.push_str(&serde_json::to_string(&Line {
            split,
            patient: p.clone(),
        })?);
        out.push('\n');
    }
    Ok(out)
}

/// Parses a cohort file. Match rows are not part of it and come back empty.
pub fn read_cohort_jsonl(text: &str) -> Result<(CohortHeader, Cohort)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: CohortHeader = serde_json::from_str(
        lines
            .next()
            .ok_or_else(|| CoreError::Data("cohort file is empty".into()))?,
    )?;
    if header.format != COHORT_FORMAT {
        return Err(CoreError::Data(format!("unexpected cohort format `{}`", header.format)));
    }
    let mut patients = Vec::with_capacity(header.n_patients);
    let mut split = BTreeMap::new();
    for (i, line) in lines.enumerate() {
        let rec: Line = serde_json::from_str(line)
            .map_err(|e| CoreError::Data(format!("cohort record {}: {e}", i + 1)))?;
        split.insert(rec.patient.id, rec.split);
        patients.push(rec.patient);
    }
    if patients.len() != header.n_patients {
        return Err(CoreError::Data(format!(
            "header announces {} patients, file holds {}",
            header.n_patients,
            patients.len()
        )));
    }
    Ok((
        header.clone(),
        Cohort {
            generator_seed: header.generator_seed,
            split_seed: header.split_seed,
            patients,
            matches: Vec::new(),
            split,
        },
    ))
}

pub fn write_matches_csv(rows: &[MatchRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner()
        .map_err(|e| CoreError::Io(std::io::Error::other(e.to_string())))
}

pub fn read_matches_csv(bytes: &[u8]) -> Result<Vec<MatchRow>> {
    let mut r = csv::Reader::from_reader(bytes);
    r.deserialize().map(|row| row.map_err(CoreError::from)).collect()
}
