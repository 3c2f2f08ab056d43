//! Case-control cohort construction: generation, propensity matching and
//! stratified splitting.

pub mod generator;
pub mod io;
pub mod matching;
pub mod propensity;
pub mod split;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ehr::{PatientId, RawPatient};
use crate::error::{CoreError, Result};

pub use generator::{generate_population, GeneratorConfig};
pub use matching::{greedy_match, MatchRow};
pub use propensity::{fit_propensity, PropensityFit};
pub use split::{stratified_split, Split, SplitFractions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortConfig {
    pub controls_per_case: usize,
    /// Keep at most this many cases (lowest ids first) before matching.
    pub max_cases: Option<usize>,
    pub split: SplitFractions,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            controls_per_case: 6,
            max_cases: None,
            split: SplitFractions::default(),
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<()> {
        if self.controls_per_case == 0 {
            return Err(CoreError::Config("controls_per_case must be at least 1".into()));
        }
        if self.max_cases == Some(0) {
            return Err(CoreError::Config("max_cases must be at least 1".into()));
        }
        self.split.validate()
    }
}

/// Matched population with split assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub generator_seed: u64,
    pub split_seed: u64,
    /// Sorted by id.
    pub patients: Vec<RawPatient>,
    pub matches: Vec<MatchRow>,
    pub split: BTreeMap<PatientId, Split>,
}

impl Cohort {
    pub fn split_of(&self, id: PatientId) -> Option<Split> {
        self.split.get(&id).copied()
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &RawPatient> {
        self.patients
            .iter()
            .filter(move |p| self.split.get(&p.id) == Some(&split))
    }

    pub fn prevalence(&self) -> f64 {
        let cases = self.patients.iter().filter(|p| p.is_case()).count();
        cases as f64 / self.patients.len().max(1) as f64
    }
}

/// Matches cases to controls by propensity and splits the matched set.
pub fn build_cohort(
    population: &[RawPatient],
    cfg: &CohortConfig,
    generator_seed: u64,
    split_seed: u64,
) -> Result<Cohort> {
    cfg.validate()?;
    let mut cases: Vec<&RawPatient> = population.iter().filter(|p| p.is_case()).collect();
    cases.sort_by_key(|p| p.id);
    if let Some(max) = cfg.max_cases {
        cases.truncate(max);
    }
    let controls: Vec<&RawPatient> = population.iter().filter(|p| !p.is_case()).collect();
    let pool: Vec<RawPatient> = cases.iter().chain(&controls).map(|p| (*p).clone()).collect();
    let fit = fit_propensity(&pool)?;
    let (case_scores, control_scores) = fit.scores.split_at(cases.len());
    let case_pairs: Vec<_> = cases.iter().map(|p| p.id).zip(case_scores.iter().copied()).collect();
    let control_pairs: Vec<_> = controls
        .iter()
        .map(|p| p.id)
        .zip(control_scores.iter().copied())
        .collect();
    let matches = greedy_match(&case_pairs, &control_pairs, cfg.controls_per_case)?;

    let mut keep: Vec<PatientId> = case_pairs.iter().map(|(id, _)| *id).collect();
    keep.extend(matches.iter().map(|m| m.control_id));
    keep.sort_unstable();
    let by_id: BTreeMap<PatientId, &RawPatient> = population.iter().map(|p| (p.id, p)).collect();
    let patients: Vec<RawPatient> = keep.iter().map(|id| by_id[id].clone()).collect();
    let labels: Vec<(PatientId, u8)> = patients.iter().map(|p| (p.id, p.label)).collect();
    let split = stratified_split(&labels, cfg.split, split_seed)?;
    Ok(Cohort {
        generator_seed,
        split_seed,
        patients,
        matches,
        split,
    })
}
