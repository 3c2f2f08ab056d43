//! Vocabularies, patient records and visit vectorization.
//!
//! A visit becomes `x' = [x; d]`: a multi-hot over medical codes, followed by
//! a multi-hot over observations, one-hot race and gender, and the
//! `log1p`-transformed age and day offset.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};

pub type PatientId = u64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawVisit {
    pub codes: Vec<String>,
    pub observations: Vec<String>,
    pub admit_day: u32,
    pub age_years: f64,
}

/// A patient as produced by the generator: string-valued concepts.
///
/// `visits` holds only the visits used as model input. For cases the onset
/// visit is excluded; for controls the latest visit, which supplies the
/// negative label, is excluded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawPatient {
    pub id: PatientId,
    pub race: String,
    pub gender: String,
    pub label: u8,
    pub visits: Vec<RawVisit>,
}

impl RawPatient {
    pub fn is_case(&self) -> bool {
        self.label == 1
    }

    /// Age at the last input visit, used as the matching variable.
    pub fn index_age(&self) -> f64 {
        self.visits.last().map(|v| v.age_years).unwrap_or(0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodeKind {
    Diagnosis,
    Procedure,
    Medication,
}

impl CodeKind {
    pub fn of(code: &str) -> Result<Self> {
        match code.split_once('-').map(|(p, _)| p) {
            Some("dx") => Ok(Self::Diagnosis),
            Some("px") => Ok(Self::Procedure),
            Some("rx") => Ok(Self::Medication),
            _ => Err(CoreError::Data(format!(
                "code `{code}` has no dx-/px-/rx- kind prefix"
            ))),
        }
    }
}

/// Dense index over retained medical codes, assigned in lexicographic order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodeVocabulary {
    pub codes: Vec<String>,
    pub kinds: Vec<CodeKind>,
    pub min_count: usize,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl CodeVocabulary {
    pub fn new(codes: Vec<String>, min_count: usize) -> Result<Self> {
        let kinds = codes.iter().map(|c| CodeKind::of(c)).collect::<Result<_>>()?;
        let mut v = Self {
            codes,
            kinds,
            min_count,
            index: HashMap::new(),
        };
        v.reindex();
        Ok(v)
    }

    fn reindex(&mut self) {
        self.index = self
            .codes
            .iter()
            .enumerate()
            .map(|(i, c)| (c.clone(), i))
            .collect();
    }

    pub fn get(&self, code: &str) -> Option<usize> {
        self.index.get(code).copied()
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationVocabulary {
    pub names: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl ObservationVocabulary {
    pub fn new(names: Vec<String>) -> Self {
        let index = names.iter().enumerate().map(|(i, c)| (c.clone(), i)).collect();
        Self { names, index }
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Everything needed to vectorize a visit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabularies {
    pub codes: CodeVocabulary,
    pub observations: ObservationVocabulary,
    pub races: Vec<String>,
    pub genders: Vec<String>,
}

impl Vocabularies {
    pub fn layout(&self) -> FeatureLayout {
        FeatureLayout {
            n_codes: self.codes.len(),
            n_obs: self.observations.len(),
            n_races: self.races.len(),
            n_genders: self.genders.len(),
        }
    }

    pub fn code_hash(&self) -> String {
        hash_strings(&self.codes.codes)
    }

    pub fn observation_hash(&self) -> String {
        hash_strings(&self.observations.names)
    }

    /// Restores lookup tables after deserialization.
    pub fn reindex(&mut self) {
        self.codes.reindex();
        self.observations = ObservationVocabulary::new(std::mem::take(&mut self.observations.names));
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut v: Vocabularies = serde_json::from_str(text)?;
        v.reindex();
        Ok(v)
    }

    /// Human-readable name of feature `i` in `x'`.
    pub fn feature_label(&self, i: usize) -> String {
        let l = self.layout();
        if i < l.obs_offset() {
            self.codes.codes[i].clone()
        } else if i < l.race_offset() {
            self.observations.names[i - l.obs_offset()].clone()
        } else if i < l.gender_offset() {
            format!("race={}", self.races[i - l.race_offset()])
        } else if i < l.numeric_offset() {
            format!("gender={}", self.genders[i - l.gender_offset()])
        } else if i == l.numeric_offset() {
            "log_age".into()
        } else {
            "log_timestamp".into()
        }
    }
}

fn hash_strings(items: &[String]) -> String {
    let mut h = Sha256::new();
    for s in items {
        h.update(s.as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

/// Offsets of the segments inside `x' = [x; obs; race; gender; age; time]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureLayout {
    pub n_codes: usize,
    pub n_obs: usize,
    pub n_races: usize,
    pub n_genders: usize,
}

impl FeatureLayout {
    pub fn obs_offset(&self) -> usize {
        self.n_codes
    }
    pub fn race_offset(&self) -> usize {
        self.n_codes + self.n_obs
    }
    pub fn gender_offset(&self) -> usize {
        self.race_offset() + self.n_races
    }
    pub fn numeric_offset(&self) -> usize {
        self.gender_offset() + self.n_genders
    }
    /// Width of `d`.
    pub fn n_other(&self) -> usize {
        self.n_obs + self.n_races + self.n_genders + 2
    }
    pub fn n_demographic(&self) -> usize {
        self.n_races + self.n_genders
    }
    /// Total feature count `n`.
    pub fn n_features(&self) -> usize {
        self.n_codes + self.n_other()
    }
}

/// A visit over vocabulary indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Visit {
    pub code_indices: Vec<usize>,
    pub observation_indices: Vec<usize>,
    pub admit_day: u32,
    pub age_years: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: PatientId,
    pub race: usize,
    pub gender: usize,
    pub label: u8,
    pub visits: Vec<Visit>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisitVector {
    /// Multi-hot over medical codes.
    pub x: Vec<f64>,
    /// Observations, race, gender, `log1p(age)`, `log1p(day)`.
    pub d: Vec<f64>,
}

impl VisitVector {
    pub fn concat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.x.len() + self.d.len());
        out.extend_from_slice(&self.x);
        out.extend_from_slice(&self.d);
        out
    }
}

/// Builds code and observation vocabularies from a raw corpus.
///
/// A code is kept when it appears in at least `min_count` visits and is not
/// one of `label_codes`. Indices follow lexicographic order, so the result
/// does not depend on record order.
pub fn build_vocabularies(
    corpus: &[RawPatient],
    min_count: usize,
    label_codes: &[String],
) -> Result<Vocabularies> {
    if corpus.is_empty() {
        return Err(CoreError::Validation("cannot build vocabularies from an empty corpus".into()));
    }
    let excluded: BTreeSet<&str> = label_codes.iter().map(String::as_str).collect();
    let mut code_counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut observations = BTreeSet::new();
    let mut races = BTreeSet::new();
    let mut genders = BTreeSet::new();
    for p in corpus {
        races.insert(p.race.clone());
        genders.insert(p.gender.clone());
        for v in &p.visits {
            let unique: BTreeSet<&str> = v.codes.iter().map(String::as_str).collect();
            for c in unique {
                *code_counts.entry(c).or_default() += 1;
            }
            observations.extend(v.observations.iter().cloned());
        }
    }
    let codes: Vec<String> = code_counts
        .into_iter()
        .filter(|(c, n)| *n >= min_count && !excluded.contains(c))
        .map(|(c, _)| c.to_string())
        .collect();
    Ok(Vocabularies {
        codes: CodeVocabulary::new(codes, min_count)?,
        observations: ObservationVocabulary::new(observations.into_iter().collect()),
        races: races.into_iter().collect(),
        genders: genders.into_iter().collect(),
    })
}

/// Maps a raw patient onto vocabulary indices.
///
/// Codes outside the vocabulary are dropped; a visit left without any
/// diagnosis code is dropped. Day offsets keep their original anchor.
pub fn encode_patient(raw: &RawPatient, vocabs: &Vocabularies) -> Result<PatientRecord> {
    let race = vocabs
        .races
        .iter()
        .position(|r| r == &raw.race)
        .ok_or_else(|| CoreError::Data(format!("patient {}: unknown race `{}`", raw.id, raw.race)))?;
    let gender = vocabs
        .genders
        .iter()
        .position(|g| g == &raw.gender)
        .ok_or_else(|| {
            CoreError::Data(format!("patient {}: unknown gender `{}`", raw.id, raw.gender))
        })?;
    let mut visits = Vec::with_capacity(raw.visits.len());
    for v in &raw.visits {
        let codes: BTreeSet<usize> = v.codes.iter().filter_map(|c| vocabs.codes.get(c)).collect();
        if !codes
            .iter()
            .any(|&c| vocabs.codes.kinds[c] == CodeKind::Diagnosis)
        {
            continue;
        }
        let obs: BTreeSet<usize> = v
            .observations
            .iter()
            .filter_map(|o| vocabs.observations.get(o))
            .collect();
        visits.push(Visit {
            code_indices: codes.into_iter().collect(),
            observation_indices: obs.into_iter().collect(),
            admit_day: v.admit_day,
            age_years: v.age_years,
        });
    }
    Ok(PatientRecord {
        id: raw.id,
        race,
        gender,
        label: raw.label,
        visits,
    })
}

pub fn vectorize_visit(
    visit: &Visit,
    patient: &PatientRecord,
    vocabs: &Vocabularies,
) -> Result<VisitVector> {
    let l = vocabs.layout();
    let mut x = vec![0.0; l.n_codes];
    for &c in &visit.code_indices {
        *x.get_mut(c).ok_or_else(|| {
            CoreError::Data(format!("code index {c} outside vocabulary of {}", l.n_codes))
        })? = 1.0;
    }
    let mut d = vec![0.0; l.n_other()];
    for &o in &visit.observation_indices {
        *d.get_mut(o).filter(|_| o < l.n_obs).ok_or_else(|| {
            CoreError::Data(format!("observation index {o} outside vocabulary of {}", l.n_obs))
        })? = 1.0;
    }
    if patient.race >= l.n_races {
        return Err(CoreError::Data(format!("race index {} out of range", patient.race)));
    }
    if patient.gender >= l.n_genders {
        return Err(CoreError::Data(format!("gender index {} out of range", patient.gender)));
    }
    d[l.n_obs + patient.race] = 1.0;
    d[l.n_obs + l.n_races + patient.gender] = 1.0;
    d[l.n_obs + l.n_demographic()] = visit.age_years.max(0.0).ln_1p();
    d[l.n_obs + l.n_demographic() + 1] = (visit.admit_day as f64).ln_1p();
    Ok(VisitVector { x, d })
}

/// Recovers (code indices, observation indices) from a vector.
pub fn decode_visit(v: &VisitVector, layout: FeatureLayout) -> (Vec<usize>, Vec<usize>) {
    let codes = (0..layout.n_codes).filter(|&i| v.x[i] == 1.0).collect();
    let obs = (0..layout.n_obs).filter(|&i| v.d[i] == 1.0).collect();
    (codes, obs)
}

/// The most recent `min(T, cap)` visits, vectorized, in chronological order.
pub fn assemble_sequence(
    patient: &PatientRecord,
    vocabs: &Vocabularies,
    max_visits: usize,
) -> Result<Vec<VisitVector>> {
    if patient.visits.is_empty() {
        return Err(CoreError::Validation(format!(
            "patient {} has no usable visits",
            patient.id
        )));
    }
    if max_visits == 0 {
        return Err(CoreError::Config("max_visits must be at least 1".into()));
    }
    let start = patient.visits.len().saturating_sub(max_visits);
    patient.visits[start..]
        .iter()
        .map(|v| vectorize_visit(v, patient, vocabs))
        .collect()
}
