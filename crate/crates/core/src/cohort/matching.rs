//! Greedy nearest-neighbour matching on the propensity logit.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::ehr::PatientId;
use crate::error::{CoreError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchRow {
    pub case_id: PatientId,
    pub control_id: PatientId,
    pub distance: f64,
}

pub fn logit(p: f64) -> f64 {
    let p = p.clamp(numkit::tape::PROB_CLAMP, 1.0 - numkit::tape::PROB_CLAMP);
    (p / (1.0 - p)).ln()
}

/// Assigns `k` controls to every case without replacement.
///
/// Cases are visited in descending score order (ties by id); each takes its
/// `k` unused controls nearest in logit, ties by control id. Rows come out
/// in processing order.
pub fn greedy_match(
    cases: &[(PatientId, f64)],
    controls: &[(PatientId, f64)],
    k: usize,
) -> Result<Vec<MatchRow>> {
    let needed = k * cases.len();
    if controls.len() < needed {
        return Err(CoreError::Validation(format!(
            "greedy matching needs {needed} controls for {} cases at 1:{k}, only {} available (deficit {})",
            cases.len(),
            controls.len(),
            needed - controls.len()
        )));
    }
    let mut order: Vec<&(PatientId, f64)> = cases.iter().collect();
    order.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    let control_logits: Vec<(PatientId, f64)> =
        controls.iter().map(|&(id, s)| (id, logit(s))).collect();
    let mut used = vec![false; controls.len()];
    let mut rows = Vec::with_capacity(needed);
    for &&(case_id, score) in &order {
        let target = logit(score);
        let mut candidates: Vec<(f64, PatientId, usize)> = control_logits
            .iter()
            .enumerate()
            .filter(|(i, _)| !used[*i])
            .map(|(i, &(id, l))| ((l - target).abs(), id, i))
            .collect();
        candidates.sort_by(|a, b| {
            a.0.partial_cmp(&b.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
        });
        for &(distance, control_id, i) in candidates.iter().take(k) {
            used[i] = true;
            rows.push(MatchRow {
                case_id,
                control_id,
                distance,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use numkit::sigmoid;

    #[test]
    fn nearest_two_of_three() {
        let rows = greedy_match(
            &[(1, 0.5)],
            &[(10, sigmoid(0.9)), (11, sigmoid(0.1)), (12, sigmoid(-0.2))],
            2,
        )
        .unwrap();
        let ids: Vec<_> = rows.iter().map(|r| r.control_id).collect();
        assert_eq!(ids, vec![11, 12]);
        assert!((rows[0].distance - 0.1).abs() < 1e-12);
        assert!((rows[1].distance - 0.2).abs() < 1e-12);
    }

    #[test]
    fn deficit_is_reported() {
        let err = greedy_match(&[(1, 0.5), (2, 0.4)], &[(3, 0.1); 5], 3).unwrap_err();
        assert!(err.to_string().contains("deficit 1"), "{err}");
    }
}
