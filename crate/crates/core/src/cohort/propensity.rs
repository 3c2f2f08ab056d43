//! Logistic propensity of case status on age at index, gender and race.

use std::collections::BTreeSet;

use numkit::sigmoid;

use crate::ehr::RawPatient;
use crate::error::{CoreError, Result};

pub const MAX_STEPS: usize = 10_000;
pub const GRAD_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct PropensityFit {
    /// In-sample probabilities, aligned with the input patients.
    pub scores: Vec<f64>,
    pub coefficients: Vec<f64>,
    pub feature_names: Vec<String>,
    pub steps: usize,
    pub grad_norm: f64,
}

/// Design matrix: intercept, standardized index age, then gender and race
/// indicators with the first (sorted) level of each dropped.
pub fn design_matrix(patients: &[RawPatient]) -> (Vec<Vec<f64>>, Vec<String>) {
    let ages: Vec<f64> = patients.iter().map(RawPatient::index_age).collect();
    let n = ages.len().max(1) as f64;
    let mean = ages.iter().sum::<f64>() / n;
    let sd = (ages.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n).sqrt();
    let genders: Vec<&str> = patients
        .iter()
        .map(|p| p.gender.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .skip(1)
        .collect();
    let races: Vec<&str> = patients
        .iter()
        .map(|p| p.race.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .skip(1)
        .collect();
    let mut names = vec!["intercept".to_string(), "age".to_string()];
    names.extend(genders.iter().map(|g| format!("gender={g}")));
    names.extend(races.iter().map(|r| format!("race={r}")));
    let rows = patients
        .iter()
        .zip(&ages)
        .map(|(p, &a)| {
            let mut row = vec![1.0, if sd > 0.0 { (a - mean) / sd } else { 0.0 }];
            row.extend(genders.iter().map(|&g| f64::from(u8::from(p.gender == g))));
            row.extend(races.iter().map(|&r| f64::from(u8::from(p.race == r))));
            row
        })
        .collect();
    (rows, names)
}

/// Fits the propensity model by full-batch gradient descent on mean BCE.
///
/// Stops when the gradient norm drops below [`GRAD_TOLERANCE`] or after
/// [`MAX_STEPS`] steps.
pub fn fit_propensity(patients: &[RawPatient]) -> Result<PropensityFit> {
    let n_cases = patients.iter().filter(|p| p.is_case()).count();
    if n_cases == 0 || n_cases == patients.len() {
        return Err(CoreError::Validation(
            "propensity fit needs both cases and controls".into(),
        ));
    }
    let (x, names) = design_matrix(patients);
    let y: Vec<f64> = patients.iter().map(|p| f64::from(p.label)).collect();
    let d = names.len();
    let n = x.len() as f64;
    // step size from a bound on the largest Hessian eigenvalue
    let trace: f64 = x.iter().flatten().map(|v| v * v).sum::<f64>() / n;
    let lr = (4.0 / trace).min(1.0);
    let mut w = vec![0.0; d];
    let mut steps = 0;
    let mut grad_norm;
    loop {
        let mut grad = vec![0.0; d];
        for (row, &t) in x.iter().zip(&y) {
            let z: f64 = row.iter().zip(&w).map(|(a, b)| a * b).sum();
            let r = sigmoid(z) - t;
            for (g, v) in grad.iter_mut().zip(row) {
                *g += r * v / n;
            }
        }
        grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if grad_norm < GRAD_TOLERANCE || steps >= MAX_STEPS {
            break;
        }
        for (wi, g) in w.iter_mut().zip(&grad) {
            *wi -= lr * g;
        }
        steps += 1;
    }
    let scores = x
        .iter()
        .map(|row| {
            let z: f64 = row.iter().zip(&w).map(|(a, b)| a * b).sum();
            sigmoid(z).clamp(numkit::tape::PROB_CLAMP, 1.0 - numkit::tape::PROB_CLAMP)
        })
        .collect();
    Ok(PropensityFit {
        scores,
        coefficients: w,
        feature_names: names,
        steps,
        grad_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ehr::RawVisit;

    fn patient(id: u64, label: u8, age: f64, gender: &str, race: &str) -> RawPatient {
        RawPatient {
            id,
            race: race.into(),
            gender: gender.into(),
            label,
            visits: vec![RawVisit {
                codes: vec!["dx-000".into()],
                observations: vec![],
                admit_day: 0,
                age_years: age,
            }],
        }
    }

    #[test]
    fn identical_covariates_give_prevalence() {
        let ps: Vec<_> = (0..14).map(|i| patient(i, u8::from(i < 2), 50.0, "f", "a")).collect();
        let fit = fit_propensity(&ps).unwrap();
        assert_eq!(fit.feature_names, vec!["intercept", "age"]);
        for s in &fit.scores {
            assert!((s - 1.0 / 7.0).abs() < 1e-6, "{s}");
        }
    }

    #[test]
    fn single_class_is_rejected() {
        let ps: Vec<_> = (0..5).map(|i| patient(i, 0, 50.0, "f", "a")).collect();
        assert!(matches!(fit_propensity(&ps), Err(CoreError::Validation(_))));
    }

    #[test]
    fn dummies_drop_reference_level() {
        let ps = vec![
            patient(0, 1, 40.0, "m", "b"),
            patient(1, 0, 60.0, "f", "a"),
            patient(2, 0, 50.0, "f", "c"),
        ];
        let (x, names) = design_matrix(&ps);
        assert_eq!(names, vec!["intercept", "age", "gender=m", "race=b", "race=c"]);
        assert_eq!(&x[0][2..], &[1.0, 1.0, 0.0]);
        assert_eq!(&x[1][2..], &[0.0, 0.0, 0.0]);
    }
}
