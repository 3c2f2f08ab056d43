use numkit::DenseArray;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use trace_core::eval::*;

/// Mean over positives of the precision among everything scored at least as high.
fn oracle(scores: &[f64], labels: &[u8]) -> f64 {
    let positives: Vec<usize> = (0..scores.len()).filter(|&i| labels[i] == 1).collect();
    let total: f64 = positives
        .iter()
        .map(|&i| {
            let above: Vec<usize> = (0..scores.len()).filter(|&j| scores[j] >= scores[i]).collect();
            let hits = above.iter().filter(|&&j| labels[j] == 1).count();
            hits as f64 / above.len() as f64
        })
        .sum();
    total / positives.len() as f64
}

#[test]
fn small_instances_match_the_threshold_oracle() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut checked = 0;
    while checked < 1000 {
        let n = rng.random_range(2..=10);
        // coarse scores force ties
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..5u8)) / 4.0).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2u8)).collect();
        let pos = labels.iter().filter(|&&l| l == 1).count();
        if pos == 0 || pos == n {
            continue;
        }
        let got = auprc(&scores, &labels).unwrap();
        let want = oracle(&scores, &labels);
        assert!((got - want).abs() < 1e-12, "{scores:?} {labels:?}: {got} vs {want}");
        checked += 1;
    }
}

#[test]
fn random_scores_recover_prevalence() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let n = 100_000;
    let labels: Vec<u8> = (0..n).map(|i| u8::from(i % 7 == 0)).collect();
    let scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let ap = auprc(&scores, &labels).unwrap();
    assert!((ap - 1.0 / 7.0).abs() < 0.02, "{ap}");
}

#[test]
fn nll_matches_term_sum() {
    let probs = [0.9, 0.2, 0.6, 0.05];
    let labels = [1, 0, 0, 1];
    let want = (-(0.9f64.ln()) - 0.8f64.ln() - 0.4f64.ln() - 0.05f64.ln()) / 4.0;
    assert!((neg_log_likelihood(&probs, &labels).unwrap() - want).abs() < 1e-12);
    let half = neg_log_likelihood(&[0.5; 3], &[1, 0, 1]).unwrap();
    assert!((half - 2f64.ln()).abs() < 1e-15);
    assert!(neg_log_likelihood(&[1.0, 0.0], &[1, 0]).unwrap() < 1e-11);
}

fn random_matrix(rng: &mut impl Rng, r: usize, c: usize) -> DenseArray {
    DenseArray::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn backprojection_identities() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
    let a = random_matrix(&mut rng, 5, 5);
    let eye = DenseArray::new(
        vec![5, 5],
        (0..25).map(|i| f64::from(u8::from(i % 6 == 0))).collect(),
    )
    .unwrap();
    assert_eq!(backproject_attention(&a, &eye).unwrap(), a);

    let w = random_matrix(&mut rng, 5, 9);
    let gram = backproject_attention(&eye, &w).unwrap();
    for i in 0..9 {
        for j in 0..9 {
            assert!((gram.get(i, j) - gram.get(j, i)).abs() < 1e-12);
        }
    }

    let b = random_matrix(&mut rng, 5, 5);
    let ab = DenseArray::new(vec![5, 5], a.values().iter().zip(b.values()).map(|(x, y)| x + y).collect()).unwrap();
    let lhs = backproject_attention(&ab, &w).unwrap();
    let pa = backproject_attention(&a, &w).unwrap();
    let pb = backproject_attention(&b, &w).unwrap();
    for k in 0..81 {
        assert!((lhs.values()[k] - pa.values()[k] - pb.values()[k]).abs() < 1e-12);
    }

    // 1ᵀ W̃ᵀ A W̃ 1 = (W̃1)ᵀ A (W̃1)
    let total: f64 = pa.values().iter().sum();
    let w1: Vec<f64> = (0..5).map(|i| w.row(i).iter().sum()).collect();
    let direct: f64 = (0..5)
        .flat_map(|i| (0..5).map(move |j| (i, j)))
        .map(|(i, j)| w1[i] * a.get(i, j) * w1[j])
        .sum();
    assert!((total - direct).abs() < 1e-10);
}

#[test]
fn backprojection_rejects_mismatched_shapes() {
    let a = DenseArray::zeros(&[3, 3]);
    let w = DenseArray::zeros(&[4, 6]);
    assert!(backproject_attention(&a, &w).is_err());
}

#[test]
fn attention_export_restricts_to_active_features() {
    let map = DenseArray::new(vec![3, 3], (0..9).map(f64::from).collect()).unwrap();
    let rows = restrict_to_active(2, &map, &[0, 2], |i| format!("f{i}"));
    assert_eq!(rows.len(), 4);
    let csv = String::from_utf8(attention_csv(&rows).unwrap()).unwrap();
    assert!(csv.starts_with("visit_index,row_feature,col_feature,weight\n"));
    assert!(csv.contains("2,f2,f0,6"));
}

proptest! {
    #[test]
    fn auprc_is_invariant_under_monotone_maps(
        pairs in prop::collection::vec((0.0f64..1.0, any::<bool>()), 2..60)
    ) {
        let scores: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let labels: Vec<u8> = pairs.iter().map(|p| u8::from(p.1)).collect();
        let pos = labels.iter().filter(|&&l| l == 1).count();
        prop_assume!(pos > 0 && pos < labels.len());
        let mapped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
        prop_assert_eq!(auprc(&scores, &labels).unwrap(), auprc(&mapped, &labels).unwrap());
        let ap = auprc(&scores, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&ap));
    }
}
