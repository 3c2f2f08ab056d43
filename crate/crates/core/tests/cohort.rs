use std::collections::{BTreeMap, BTreeSet};

use numkit::sigmoid;
use proptest::prelude::*;
use trace_core::cohort::io::{read_cohort_jsonl, read_matches_csv, write_cohort_jsonl, write_matches_csv};
use trace_core::cohort::propensity::fit_propensity;
use trace_core::cohort::*;
use trace_core::ehr::{build_vocabularies, RawPatient, RawVisit};
use trace_core::CoreError;

fn small(seed: u64, population: usize) -> GeneratorConfig {
    GeneratorConfig {
        seed,
        population,
        ..Default::default()
    }
}

fn case_count(cfg: &GeneratorConfig) -> usize {
    generate_population(cfg).unwrap().iter().filter(|p| p.is_case()).count()
}

#[test]
fn zero_hazard_weights_match_intercept_rate() {
    let cfg = GeneratorConfig {
        population: 20_000,
        hazard_weights: vec![0.0, 0.0],
        age_weight: 0.0,
        hazard_intercept: -3.0,
        ..small(11, 0)
    };
    // P(case) = Σ_T pmf(T) · (1 − (1−p)^(T−1)); T = 2 + k, k truncated geometric
    let p = sigmoid(cfg.hazard_intercept);
    let pg = 1.0 / (cfg.mean_visits - 1.0);
    let kmax = cfg.max_visits - 2;
    let weights: Vec<f64> = (0..=kmax).map(|k| pg * (1.0 - pg).powi(k as i32)).collect();
    let z: f64 = weights.iter().sum();
    let expected: f64 = weights
        .iter()
        .enumerate()
        .map(|(k, w)| w / z * (1.0 - (1.0 - p).powi((k + 1) as i32)))
        .sum();
    let n = cfg.population as f64;
    let rate = case_count(&cfg) as f64 / n;
    let sigma = (expected * (1.0 - expected) / n).sqrt();
    assert!((rate - expected).abs() < 3.0 * sigma, "rate {rate} vs {expected} ± {sigma}");
}

#[test]
fn doubling_a_risk_weight_raises_case_counts() {
    let mut total = (0, 0);
    for seed in 0..10 {
        let base = small(seed, 1000);
        let mut doubled = base.clone();
        doubled.hazard_weights[1] *= 2.0;
        let (a, b) = (case_count(&base), case_count(&doubled));
        assert!(b >= a, "seed {seed}: {b} < {a}");
        total.0 += a;
        total.1 += b;
    }
    assert!(total.1 > total.0);
}

#[test]
fn generation_is_reproducible() {
    let cfg = small(3, 200);
    let a = serde_json::to_string(&generate_population(&cfg).unwrap()).unwrap();
    let b = serde_json::to_string(&generate_population(&cfg).unwrap()).unwrap();
    assert_eq!(a, b);
    let c = serde_json::to_string(&generate_population(&small(4, 200)).unwrap()).unwrap();
    assert_ne!(a, c);
}

fn mutual_information(pairs: &[(bool, bool)]) -> f64 {
    let n = pairs.len() as f64;
    let mut joint = BTreeMap::new();
    for &(a, b) in pairs {
        *joint.entry((a, b)).or_insert(0.0) += 1.0 / n;
    }
    let pa = |a: bool| joint.iter().filter(|((x, _), _)| *x == a).map(|(_, p)| p).sum::<f64>();
    let pb = |b: bool| joint.iter().filter(|((_, y), _)| *y == b).map(|(_, p)| p).sum::<f64>();
    joint
        .iter()
        .map(|(&(a, b), &p)| p * (p / (pa(a) * pb(b))).ln())
        .sum()
}

#[test]
fn planted_signal_carries_information() {
    let cfg = small(5, 10_000);
    let pop = generate_population(&cfg).unwrap();
    let pairs: Vec<(bool, bool)> = pop
        .iter()
        .map(|p| {
            let risk = p
                .visits
                .iter()
                .any(|v| v.codes.iter().any(|c| cfg.risk_codes.contains(c)));
            (risk, p.is_case())
        })
        .collect();
    let mi = mutual_information(&pairs);
    assert!(mi > 0.005, "mutual information {mi}");
}

fn patient(id: u64, label: u8, age: f64) -> RawPatient {
    RawPatient {
        id,
        race: "a".into(),
        gender: "f".into(),
        label,
        visits: vec![RawVisit {
            codes: vec!["dx-001".into()],
            observations: vec![],
            admit_day: 0,
            age_years: age,
        }],
    }
}

#[test]
fn propensity_separates_a_separable_toy() {
    let ps: Vec<_> = (0..20)
        .map(|i| patient(i, u8::from(i < 5), if i < 5 { 70.0 + i as f64 } else { 30.0 + i as f64 }))
        .collect();
    let fit = fit_propensity(&ps).unwrap();
    let min_case = fit.scores[..5].iter().cloned().fold(f64::INFINITY, f64::min);
    let max_control = fit.scores[5..].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert!(min_case > max_control);
    assert!(fit.scores.iter().all(|&s| s > 0.0 && s < 1.0));
}

/// Greedy rule replayed one pick at a time.
fn replay_greedy(cases: &[(u64, f64)], controls: &[(u64, f64)], k: usize) -> Vec<(u64, u64)> {
    let logit = |p: f64| (p / (1.0 - p)).ln();
    let mut order = cases.to_vec();
    order.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut used = BTreeSet::new();
    let mut out = Vec::new();
    for (cid, cs) in order {
        for _ in 0..k {
            let best = controls
                .iter()
                .filter(|(id, _)| !used.contains(id))
                .min_by(|a, b| {
                    let da = (logit(a.1) - logit(cs)).abs();
                    let db = (logit(b.1) - logit(cs)).abs();
                    da.partial_cmp(&db).unwrap().then(a.0.cmp(&b.0))
                })
                .unwrap();
            used.insert(best.0);
            out.push((cid, best.0));
        }
    }
    out
}

/// Minimum total distance over every assignment of k distinct controls per case.
fn optimal_total(cases: &[(u64, f64)], controls: &[(u64, f64)], k: usize) -> f64 {
    fn rec(ci: usize, cases: &[f64], ctl: &[f64], used: &mut Vec<bool>, k: usize, start: usize, left: usize) -> f64 {
        if ci == cases.len() {
            return 0.0;
        }
        if left == 0 {
            return rec(ci + 1, cases, ctl, used, k, 0, k);
        }
        let mut best = f64::INFINITY;
        for j in start..ctl.len() {
            if used[j] {
                continue;
            }
            used[j] = true;
            let d = (cases[ci] - ctl[j]).abs() + rec(ci, cases, ctl, used, k, j + 1, left - 1);
            used[j] = false;
            best = best.min(d);
        }
        best
    }
    let logit = |p: f64| (p / (1.0 - p)).ln();
    let cs: Vec<f64> = cases.iter().map(|c| logit(c.1)).collect();
    let ct: Vec<f64> = controls.iter().map(|c| logit(c.1)).collect();
    rec(0, &cs, &ct, &mut vec![false; ct.len()], k, 0, k)
}

#[test]
fn greedy_matching_replays_and_bounds_optimum() {
    use rand::{Rng, SeedableRng};
    for seed in 0..20 {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let cases: Vec<(u64, f64)> = (0..3).map(|i| (i, rng.random_range(0.05..0.95))).collect();
        let controls: Vec<(u64, f64)> = (10..22).map(|i| (i, rng.random_range(0.05..0.95))).collect();
        let rows = greedy_match(&cases, &controls, 2).unwrap();
        let got: Vec<(u64, u64)> = rows.iter().map(|r| (r.case_id, r.control_id)).collect();
        assert_eq!(got, replay_greedy(&cases, &controls, 2));
        let total: f64 = rows.iter().map(|r| r.distance).sum();
        assert!(total >= optimal_total(&cases, &controls, 2) - 1e-12);
    }
}

#[test]
fn one_to_six_uses_every_control_once() {
    let cases: Vec<(u64, f64)> = (0..10).map(|i| (i, 0.1 + 0.05 * i as f64)).collect();
    let controls: Vec<(u64, f64)> = (100..160).map(|i| (i, 0.05 + 0.01 * (i - 100) as f64)).collect();
    let rows = greedy_match(&cases, &controls, 6).unwrap();
    let used: BTreeSet<u64> = rows.iter().map(|r| r.control_id).collect();
    assert_eq!(used.len(), 60);
    let mut per_case = BTreeMap::new();
    for r in &rows {
        *per_case.entry(r.case_id).or_insert(0) += 1;
    }
    assert!(per_case.values().all(|&n| n == 6));
    let prevalence = 10.0 / (10.0 + used.len() as f64);
    assert!((prevalence - 1.0 / 7.0).abs() < 1e-12);
}

#[test]
fn insufficient_controls_report_deficit() {
    let err = greedy_match(&[(0, 0.5)], &[(1, 0.5); 4], 6).unwrap_err();
    assert!(matches!(err, CoreError::Validation(ref m) if m.contains("deficit 2")));
}

#[test]
fn reference_split_counts() {
    let (cases, controls) = (21_113u64, 126_678u64);
    assert_eq!(cases + controls, 147_791);
    let ids: Vec<(u64, u8)> = (0..cases + controls).map(|i| (i, u8::from(i < cases))).collect();
    let split = stratified_split(&ids, SplitFractions::default(), 1).unwrap();
    let count = |s| split.values().filter(|v| **v == s).count();
    assert_eq!(count(Split::Train), 110_842);
    assert_eq!(count(Split::Valid), 14_778);
    assert_eq!(count(Split::Test), 22_171);
}

#[test]
fn split_prevalence_within_one_patient() {
    // matched cohorts at 1:6, including the reference size
    for n_cases in [286u64, 21_113] {
        let ids: Vec<(u64, u8)> = (0..n_cases * 7).map(|i| (i, u8::from(i % 7 == 0))).collect();
        for seed in 0..20 {
            let split = stratified_split(&ids, SplitFractions::default(), seed).unwrap();
            assert_eq!(split.len(), ids.len());
            let mut tally: BTreeMap<Split, (f64, f64)> = BTreeMap::new();
            for (id, label) in &ids {
                let t = tally.entry(split[id]).or_default();
                t.0 += 1.0;
                t.1 += f64::from(*label);
            }
            for (s, (size, cases)) in tally {
                assert!((cases - size / 7.0).abs() <= 1.0, "seed {seed} {s}: {cases} of {size}");
            }
        }
    }
}

#[test]
fn cohort_round_trips_through_files() {
    let pop = generate_population(&small(9, 800)).unwrap();
    let cfg = CohortConfig {
        max_cases: Some(40),
        ..Default::default()
    };
    let cohort = build_cohort(&pop, &cfg, 9, 10).unwrap();
    assert_eq!(cohort.patients.len(), 280);
    assert!((cohort.prevalence() - 1.0 / 7.0).abs() < 1e-12);
    let vocabs = build_vocabularies(&cohort.patients, 5, &["dx-ckd".into()]).unwrap();
    let text = write_cohort_jsonl(&cohort, &vocabs).unwrap();
    let (header, back) = read_cohort_jsonl(&text).unwrap();
    assert_eq!(header.code_vocab_sha256, vocabs.code_hash());
    assert_eq!(back.patients, cohort.patients);
    assert_eq!(back.split, cohort.split);
    let csv = write_matches_csv(&cohort.matches).unwrap();
    assert!(String::from_utf8_lossy(&csv).starts_with("case_id,control_id,distance"));
    assert_eq!(read_matches_csv(&csv).unwrap(), cohort.matches);
}

proptest! {
    #[test]
    fn matching_is_injective(scores in prop::collection::vec(0.01f64..0.99, 4..40), k in 1usize..4) {
        let n_cases = scores.len() / (k + 1);
        prop_assume!(n_cases >= 1);
        let cases: Vec<(u64, f64)> = scores[..n_cases].iter().enumerate().map(|(i, &s)| (i as u64, s)).collect();
        let controls: Vec<(u64, f64)> = scores[n_cases..].iter().enumerate().map(|(i, &s)| (1000 + i as u64, s)).collect();
        let rows = greedy_match(&cases, &controls, k).unwrap();
        let used: BTreeSet<u64> = rows.iter().map(|r| r.control_id).collect();
        prop_assert_eq!(used.len(), rows.len());
        prop_assert_eq!(rows.len(), k * n_cases);
    }

    #[test]
    fn split_is_an_exact_partition(n in 1usize..300, seed in 0u64..1000) {
        let ids: Vec<(u64, u8)> = (0..n as u64).map(|i| (i, u8::from(i % 5 == 0))).collect();
        let split = stratified_split(&ids, SplitFractions::default(), seed).unwrap();
        prop_assert_eq!(split.len(), n);
        prop_assert!(ids.iter().all(|(id, _)| split.contains_key(id)));
    }
}
