//! Ranking and likelihood metrics, attention back-projection and exports.

use std::cmp::Ordering;

use serde::Serialize;

use numkit::tape::PROB_CLAMP;
use numkit::DenseArray;

use crate::ehr::PatientId;
use crate::error::{CoreError, Result};

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(CoreError::Validation(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(CoreError::Validation("scores must be finite".into()));
    }
    Ok(())
}

/// Average precision: `Σ (R_k − R_{k−1})·P_k` over distinct score
/// thresholds in descending order. Tied scores form one threshold.
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 || positives == labels.len() {
        return Err(CoreError::Validation("AUPRC needs both positive and negative labels".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Mean binary cross entropy with probabilities clamped to `[1e-12, 1−1e-12]`.
pub fn neg_log_likelihood(probs: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(probs, labels)?;
    if probs.is_empty() {
        return Err(CoreError::Validation("NLL of an empty set".into()));
    }
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &l)| {
            let q = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            if l == 1 {
                -q.ln()
            } else {
                -(1.0 - q).ln()
            }
        })
        .sum();
    Ok(total / probs.len() as f64)
}

/// `W̃_zᵀ · A · W̃_z`: an `ñ×ñ` attention map in the original `n×n` space.
pub fn backproject_attention(attention: &DenseArray, w_down: &DenseArray) -> Result<DenseArray> {
    let r = attention.rows();
    if attention.shape() != [r, r] || w_down.rows() != r || w_down.shape().len() != 2 {
        return Err(CoreError::Num(numkit::NumError::Dimension {
            op: "backproject_attention",
            left: attention.shape().to_vec(),
            right: w_down.shape().to_vec(),
        }));
    }
    let aw = attention.matmul(w_down)?;
    Ok(w_down.transpose().matmul(&aw)?)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttentionRow {
    pub visit_index: usize,
    pub row_feature: String,
    pub col_feature: String,
    pub weight: f64,
}

/// Entries of a back-projected map restricted to the visit's active features.
pub fn restrict_to_active(
    visit_index: usize,
    map: &DenseArray,
    active: &[usize],
    label: impl Fn(usize) -> String,
) -> Vec<AttentionRow> {
    let mut rows = Vec::with_capacity(active.len() * active.len());
    for &i in active {
        for &j in active {
            rows.push(AttentionRow {
                visit_index,
                row_feature: label(i),
                col_feature: label(j),
                weight: map.get(i, j),
            });
        }
    }
    rows
}

pub fn attention_csv(rows: &[AttentionRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner()
        .map_err(|e| CoreError::Io(std::io::Error::other(e.to_string())))
}

/// `id,label,e1..eD`, rows in the given order.
pub fn embeddings_csv(rows: &[(PatientId, u8, Vec<f64>)]) -> Result<Vec<u8>> {
    let dim = rows.first().map(|r| r.2.len()).unwrap_or(0);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["id".to_string(), "label".to_string()];
    header.extend((1..=dim).map(|i| format!("e{i}")));
    w.write_record(&header)?;
    for (id, label, e) in rows {
        if e.len() != dim {
            return Err(CoreError::Data(format!("embedding of patient {id} has width {}", e.len())));
        }
        let mut rec = vec![id.to_string(), label.to_string()];
        rec.extend(e.iter().map(|v| format!("{v:e}")));
        w.write_record(&rec)?;
    }
    w.into_inner()
        .map_err(|e| CoreError::Io(std::io::Error::other(e.to_string())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example() {
        let ap = auprc(&[0.9, 0.8, 0.3], &[1, 0, 1]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_ranking_is_one() {
        assert_eq!(auprc(&[0.9, 0.7, 0.2, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
    }

    #[test]
    fn ties_are_one_threshold() {
        // all tied: precision equals prevalence at the only threshold
        let ap = auprc(&[0.5; 4], &[1, 0, 0, 0]).unwrap();
        assert_eq!(ap, 0.25);
    }

    #[test]
    fn single_class_is_rejected() {
        assert!(auprc(&[0.1, 0.2], &[0, 0]).is_err());
    }

    #[test]
    fn nll_examples() {
        let ln2 = std::f64::consts::LN_2;
        assert!((neg_log_likelihood(&[0.5, 0.5], &[0, 1]).unwrap() - ln2).abs() < 1e-15);
        assert!(neg_log_likelihood(&[1.0, 0.0], &[1, 0]).unwrap() < 1e-11);
    }
}
