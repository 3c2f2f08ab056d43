//! Synthetic longitudinal population with a planted onset hazard.
//!
//! Every patient draws a visit count, a topic mixture over codes and
//! observations, and one on/off "flare" chain per risk code. After each visit
//! the onset hazard is `σ(b₀ + Σ_r w_r·E_r + w_age·(age−50)/10)`, where `E_r`
//! is an exponentially decayed count of recent risk-code occurrences. The
//! first visit whose uniform draw falls below the hazard makes the patient a
//! case, with onset at the following visit.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution, Exp, Gamma, Geometric, Poisson};
use serde::{Deserialize, Serialize};

use numkit::{derive_seed, seeded_rng, sigmoid, SeededRng};

use crate::ehr::{RawPatient, RawVisit};
use crate::error::{CoreError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Category {
    pub name: String,
    pub p: f64,
}

fn categories(items: &[(&str, f64)]) -> Vec<Category> {
    items
        .iter()
        .map(|(n, p)| Category {
            name: n.to_string(),
            p: *p,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub seed: u64,
    /// Patients generated before case-control selection.
    pub population: usize,
    pub n_codes: usize,
    pub n_observations: usize,
    pub n_topics: usize,
    /// Dirichlet concentration of each patient's topic mixture.
    pub topic_concentration: f64,
    /// Chance that an extra code or observation ignores the visit topic.
    pub background_rate: f64,
    /// Mean total visits per patient, label visit included.
    pub mean_visits: f64,
    pub max_visits: usize,
    pub mean_gap_days: f64,
    pub codes_per_visit: f64,
    pub observations_per_visit: f64,
    pub min_age: f64,
    pub max_age: f64,
    pub risk_codes: Vec<String>,
    pub hazard_weights: Vec<f64>,
    pub hazard_intercept: f64,
    pub age_weight: f64,
    /// Per-visit retention of accumulated exposure.
    pub exposure_decay: f64,
    /// Beta(a, b) prior of each patient's per-visit flare onset rate.
    pub flare_onset_alpha: f64,
    pub flare_onset_beta: f64,
    pub flare_persistence: f64,
    /// Probability a risk code is recorded during a flare / outside one.
    pub flare_emission: f64,
    pub baseline_emission: f64,
    pub races: Vec<Category>,
    pub genders: Vec<Category>,
    pub label_code: String,
    /// Codes that are never emitted.
    pub excluded_codes: Vec<String>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            population: 4000,
            n_codes: 100,
            n_observations: 50,
            n_topics: 10,
            topic_concentration: 0.5,
            background_rate: 0.2,
            mean_visits: 10.0,
            max_visits: 48,
            mean_gap_days: 60.0,
            codes_per_visit: 3.0,
            observations_per_visit: 2.0,
            min_age: 30.0,
            max_age: 75.0,
            risk_codes: vec!["dx-000".into(), "dx-001".into()],
            hazard_weights: vec![1.5, 1.5],
            hazard_intercept: -4.5,
            age_weight: 0.2,
            exposure_decay: 0.3,
            flare_onset_alpha: 1.0,
            flare_onset_beta: 8.0,
            flare_persistence: 0.5,
            flare_emission: 0.9,
            baseline_emission: 0.02,
            races: categories(&[("white", 0.6), ("black", 0.2), ("asian", 0.1), ("other", 0.1)]),
            genders: categories(&[("female", 0.5), ("male", 0.5)]),
            label_code: "dx-ckd".into(),
            excluded_codes: Vec::new(),
        }
    }
}

/// Code names in kind order: 60% diagnoses, then procedures, then medications.
pub fn code_names(n_codes: usize) -> Vec<String> {
    let n_dx = (n_codes * 3).div_ceil(5);
    let n_px = (n_codes - n_dx) / 2;
    let n_rx = n_codes - n_dx - n_px;
    let mut out = Vec::with_capacity(n_codes);
    out.extend((0..n_dx).map(|i| format!("dx-{i:03}")));
    out.extend((0..n_px).map(|i| format!("px-{i:03}")));
    out.extend((0..n_rx).map(|i| format!("rx-{i:03}")));
    out
}

pub fn observation_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("lab-{i:03}")).collect()
}

fn kind_index(code: &str) -> usize {
    code.split_once('-')
        .and_then(|(_, i)| i.parse().ok())
        .unwrap_or(0)
}

fn check_categories(what: &str, cats: &[Category]) -> Result<()> {
    if cats.is_empty() || cats.iter().any(|c| !(c.p >= 0.0) || c.p.is_nan()) {
        return Err(CoreError::Validation(format!("{what}: probabilities must be nonnegative")));
    }
    let total: f64 = cats.iter().map(|c| c.p).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(CoreError::Validation(format!("{what}: probabilities sum to {total}, not 1")));
    }
    Ok(())
}

fn check_probability(what: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(CoreError::Validation(format!("{what} = {p} is not a probability")));
    }
    Ok(())
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CoreError::Validation(m));
        if self.n_codes == 0 {
            return fail("n_codes must be positive".into());
        }
        if self.n_topics == 0 {
            return fail("n_topics must be positive".into());
        }
        if self.population == 0 {
            return fail("population must be positive".into());
        }
        if !(self.mean_visits >= 2.0) || self.max_visits < 2 || (self.max_visits as f64) < self.mean_visits {
            return fail(format!(
                "visit counts need 2 <= mean_visits ({}) <= max_visits ({})",
                self.mean_visits, self.max_visits
            ));
        }
        if !(self.mean_gap_days >= 1.0) || !(self.codes_per_visit >= 1.0) || !(self.observations_per_visit >= 0.0) {
            return fail("mean_gap_days and codes_per_visit must be >= 1, observations_per_visit >= 0".into());
        }
        if !(self.topic_concentration > 0.0) || !(self.min_age > 0.0) || !(self.max_age >= self.min_age) {
            return fail("topic_concentration and ages must be positive with min_age <= max_age".into());
        }
        if self.flare_onset_alpha <= 0.0 || self.flare_onset_beta <= 0.0 {
            return fail("flare onset Beta parameters must be positive".into());
        }
        for (what, p) in [
            ("background_rate", self.background_rate),
            ("exposure_decay", self.exposure_decay),
            ("flare_persistence", self.flare_persistence),
            ("flare_emission", self.flare_emission),
            ("baseline_emission", self.baseline_emission),
        ] {
            check_probability(what, p)?;
        }
        if self.risk_codes.len() != self.hazard_weights.len() {
            return fail(format!(
                "{} risk codes but {} hazard weights",
                self.risk_codes.len(),
                self.hazard_weights.len()
            ));
        }
        if self
            .hazard_weights
            .iter()
            .chain([&self.hazard_intercept, &self.age_weight])
            .any(|w| !w.is_finite())
        {
            return fail("hazard weights must be finite".into());
        }
        let names = code_names(self.n_codes);
        for r in &self.risk_codes {
            if !names.contains(r) || self.excluded_codes.contains(r) {
                return fail(format!("risk code `{r}` is not an emitted code"));
            }
        }
        if names.contains(&self.label_code) {
            return fail(format!("label code `{}` collides with a feature code", self.label_code));
        }
        check_categories("races", &self.races)?;
        check_categories("genders", &self.genders)?;
        Ok(())
    }

    /// Success probability of the geometric extra-visit count.
    pub fn geometric_p(&self) -> f64 {
        1.0 / (self.mean_visits - 1.0)
    }
}

struct Pools {
    /// Per topic: diagnosis codes, then all codes.
    dx_by_topic: Vec<Vec<String>>,
    codes_by_topic: Vec<Vec<String>>,
    all_codes: Vec<String>,
    obs_by_topic: Vec<Vec<String>>,
    all_obs: Vec<String>,
}

impl Pools {
    fn new(cfg: &GeneratorConfig) -> Result<Self> {
        let usable: Vec<String> = code_names(cfg.n_codes)
            .into_iter()
            .filter(|c| !cfg.risk_codes.contains(c) && !cfg.excluded_codes.contains(c))
            .collect();
        let all_dx: Vec<String> = usable.iter().filter(|c| c.starts_with("dx-")).cloned().collect();
        if all_dx.is_empty() {
            return Err(CoreError::Validation(
                "infeasible config: no diagnosis code left for visits".into(),
            ));
        }
        let by_topic = |items: &[String]| -> Vec<Vec<String>> {
            (0..cfg.n_topics)
                .map(|k| {
                    items
                        .iter()
                        .filter(|c| kind_index(c) % cfg.n_topics == k)
                        .cloned()
                        .collect()
                })
                .collect()
        };
        let mut dx_by_topic = by_topic(&all_dx);
        for pool in &mut dx_by_topic {
            if pool.is_empty() {
                pool.clone_from(&all_dx);
            }
        }
        let codes_by_topic = by_topic(&usable);
        let all_obs = observation_names(cfg.n_observations);
        let obs_by_topic = by_topic(&all_obs);
        Ok(Self {
            dx_by_topic,
            codes_by_topic,
            all_codes: usable,
            obs_by_topic,
            all_obs,
        })
    }
}

fn pick_category<'a>(rng: &mut SeededRng, cats: &'a [Category]) -> &'a str {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for c in cats {
        acc += c.p;
        if u < acc {
            return &c.name;
        }
    }
    &cats[cats.len() - 1].name
}

fn pick<'a>(rng: &mut SeededRng, topic: &'a [String], all: &'a [String], background: f64) -> Option<&'a String> {
    if topic.is_empty() || rng.random::<f64>() < background {
        all.choose(rng)
    } else {
        topic.choose(rng)
    }
}

fn poisson(rng: &mut SeededRng, mean: f64) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).map(|d| d.sample(rng) as usize).unwrap_or(0)
}

/// One fully drawn history before the outcome is decided.
struct Trajectory {
    visits: Vec<RawVisit>,
    /// `presence[t][r]`: risk code r recorded at visit t.
    presence: Vec<Vec<bool>>,
    uniforms: Vec<f64>,
}

fn draw_trajectory(cfg: &GeneratorConfig, pools: &Pools, rng: &mut SeededRng) -> Trajectory {
    let geometric = Geometric::new(cfg.geometric_p()).expect("validated probability");
    let n_visits = loop {
        let t = 2 + geometric.sample(rng) as usize;
        if t <= cfg.max_visits {
            break t;
        }
    };
    let gamma = Gamma::new(cfg.topic_concentration, 1.0).expect("positive concentration");
    let mut mixture: Vec<f64> = (0..cfg.n_topics).map(|_| gamma.sample(rng)).collect();
    let total: f64 = mixture.iter().sum();
    if total > 0.0 {
        mixture.iter_mut().for_each(|p| *p /= total);
    } else {
        mixture[0] = 1.0;
    }
    let age0 = rng.random_range(cfg.min_age..=cfg.max_age);
    let gap = Exp::new(1.0 / cfg.mean_gap_days).expect("positive gap");
    let beta = Beta::new(cfg.flare_onset_alpha, cfg.flare_onset_beta).expect("positive beta");
    let onset_rates: Vec<f64> = cfg.risk_codes.iter().map(|_| beta.sample(rng)).collect();
    let mut flare: Vec<bool> = onset_rates
        .iter()
        .map(|&q| {
            let stationary = q / (q + 1.0 - cfg.flare_persistence).max(1e-12);
            rng.random::<f64>() < stationary
        })
        .collect();

    let mut visits = Vec::with_capacity(n_visits);
    let mut presence = Vec::with_capacity(n_visits);
    let mut day = 0u32;
    for t in 0..n_visits {
        if t > 0 {
            day += (gap.sample(rng).round() as u32).max(1);
            for (f, &q) in flare.iter_mut().zip(&onset_rates) {
                let u: f64 = rng.random();
                *f = if *f { u < cfg.flare_persistence } else { u < q };
            }
        }
        let topic = {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut k = mixture.len() - 1;
            for (i, p) in mixture.iter().enumerate() {
                acc += p;
                if u < acc {
                    k = i;
                    break;
                }
            }
            k % cfg.n_topics
        };
        let mut codes = Vec::new();
        codes.push(
            pools.dx_by_topic[topic]
                .choose(rng)
                .expect("non-empty pool")
                .clone(),
        );
        for _ in 0..poisson(rng, cfg.codes_per_visit - 1.0) {
            if let Some(c) = pick(rng, &pools.codes_by_topic[topic], &pools.all_codes, cfg.background_rate) {
                codes.push(c.clone());
            }
        }
        let mut present = Vec::with_capacity(flare.len());
        for (r, &on) in flare.iter().enumerate() {
            let p = if on { cfg.flare_emission } else { cfg.baseline_emission };
            let hit = rng.random::<f64>() < p;
            if hit {
                codes.push(cfg.risk_codes[r].clone());
            }
            present.push(hit);
        }
        let mut observations = Vec::new();
        for _ in 0..poisson(rng, cfg.observations_per_visit) {
            if let Some(o) = pick(rng, &pools.obs_by_topic[topic], &pools.all_obs, cfg.background_rate) {
                observations.push(o.clone());
            }
        }
        codes.sort();
        codes.dedup();
        observations.sort();
        observations.dedup();
        visits.push(RawVisit {
            codes,
            observations,
            admit_day: day,
            age_years: age0 + day as f64 / 365.25,
        });
        presence.push(present);
    }
    let uniforms = (0..n_visits).map(|_| rng.random()).collect();
    Trajectory {
        visits,
        presence,
        uniforms,
    }
}

/// Onset hazard after each visit of a drawn history.
fn hazards(cfg: &GeneratorConfig, tr: &Trajectory) -> Vec<f64> {
    let mut exposure = vec![0.0; cfg.risk_codes.len()];
    tr.visits
        .iter()
        .zip(&tr.presence)
        .map(|(v, present)| {
            let mut logit = cfg.hazard_intercept + cfg.age_weight * (v.age_years - 50.0) / 10.0;
            for ((e, &hit), w) in exposure.iter_mut().zip(present).zip(&cfg.hazard_weights) {
                *e = cfg.exposure_decay * *e + if hit { 1.0 } else { 0.0 };
                logit += w * *e;
            }
            sigmoid(logit)
        })
        .collect()
}

fn generate_patient(cfg: &GeneratorConfig, pools: &Pools, index: usize) -> RawPatient {
    let mut rng = seeded_rng(derive_seed(cfg.seed, index as u64));
    let gender = pick_category(&mut rng, &cfg.genders).to_string();
    let race = pick_category(&mut rng, &cfg.races).to_string();
    let tr = draw_trajectory(cfg, pools, &mut rng);
    let h = hazards(cfg, &tr);
    let n = tr.visits.len();
    let onset = (0..n - 1).find(|&t| tr.uniforms[t] < h[t]);
    let (label, keep) = match onset {
        Some(t) => (1, t + 1),
        None => (0, n - 1),
    };
    let mut visits = tr.visits;
    visits.truncate(keep);
    RawPatient {
        id: index as u64,
        race,
        gender,
        label,
        visits,
    }
}

/// Generates `cfg.population` patients; identical configs give identical output.
pub fn generate_population(cfg: &GeneratorConfig) -> Result<Vec<RawPatient>> {
    cfg.validate()?;
    let pools = Pools::new(cfg)?;
    Ok((0..cfg.population)
        .map(|i| generate_patient(cfg, &pools, i))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        GeneratorConfig::default().validate().unwrap();
    }

    #[test]
    fn code_names_split_by_kind() {
        let names = code_names(100);
        assert_eq!(names.iter().filter(|c| c.starts_with("dx-")).count(), 60);
        assert_eq!(names.iter().filter(|c| c.starts_with("px-")).count(), 20);
        assert_eq!(names.iter().filter(|c| c.starts_with("rx-")).count(), 20);
    }

    #[test]
    fn zero_codes_is_infeasible() {
        let cfg = GeneratorConfig {
            n_codes: 0,
            ..Default::default()
        };
        assert!(matches!(generate_population(&cfg), Err(CoreError::Validation(_))));
    }

    #[test]
    fn risk_codes_must_exist() {
        let cfg = GeneratorConfig {
            risk_codes: vec!["dx-999".into(), "dx-001".into()],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn histories_are_well_formed() {
        let cfg = GeneratorConfig {
            population: 300,
            ..Default::default()
        };
        for p in generate_population(&cfg).unwrap() {
            assert!(!p.visits.is_empty());
            assert_eq!(p.visits[0].admit_day, 0);
            for w in p.visits.windows(2) {
                assert!(w[0].admit_day < w[1].admit_day);
                assert!(w[0].age_years < w[1].age_years);
            }
            for v in &p.visits {
                assert!(v.codes.iter().any(|c| c.starts_with("dx-")));
                assert!(!v.codes.contains(&cfg.label_code));
            }
            if p.label == 0 {
                assert!(p.visits.len() < cfg.max_visits);
            }
        }
    }
}
