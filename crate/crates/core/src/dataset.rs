//! Model-ready patients: truncated, vectorized visit sequences with the
//! sparse view of `x'` used by the embedding layers.

use numkit::DenseArray;

use crate::cohort::{Cohort, Split};
use crate::ehr::{assemble_sequence, encode_patient, FeatureLayout, PatientId, Vocabularies, VisitVector};
use crate::error::{CoreError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedVisit {
    pub vector: VisitVector,
    /// Positions of nonzero entries of `x'`, ascending.
    pub active: Vec<usize>,
    /// Values of `x'` at `active`.
    pub active_values: Vec<f64>,
}

impl PreparedVisit {
    pub fn new(vector: VisitVector) -> Self {
        let full = vector.concat();
        let active: Vec<usize> = (0..full.len()).filter(|&i| full[i] != 0.0).collect();
        let active_values = active.iter().map(|&i| full[i]).collect();
        Self {
            vector,
            active,
            active_values,
        }
    }

    pub fn codes(&self) -> DenseArray {
        DenseArray::vector(self.vector.x.clone())
    }

    pub fn full(&self) -> DenseArray {
        DenseArray::vector(self.vector.concat())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: PatientId,
    pub label: u8,
    pub split: Split,
    pub visits: Vec<PreparedVisit>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub layout: FeatureLayout,
    /// Sorted by id.
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }
}

/// Encodes and truncates every cohort patient.
///
/// Patients left without a usable visit after vocabulary filtering are
/// dropped with a warning.
pub fn prepare_dataset(cohort: &Cohort, vocabs: &Vocabularies, max_visits: usize) -> Result<Dataset> {
    let mut samples = Vec::with_capacity(cohort.patients.len());
    for raw in &cohort.patients {
        let split = cohort
            .split_of(raw.id)
            .ok_or_else(|| CoreError::Data(format!("patient {} has no split", raw.id)))?;
        let rec = encode_patient(raw, vocabs)?;
        if rec.visits.is_empty() {
            log::warn!("patient {} has no visit with a retained diagnosis code; skipped", raw.id);
            continue;
        }
        let visits = assemble_sequence(&rec, vocabs, max_visits)?
            .into_iter()
            .map(PreparedVisit::new)
            .collect();
        samples.push(Sample {
            id: raw.id,
            label: raw.label,
            split,
            visits,
        });
    }
    samples.sort_by_key(|s| s.id);
    Ok(Dataset {
        layout: vocabs.layout(),
        samples,
    })
}
