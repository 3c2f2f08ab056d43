use numkit::{Adadelta, DenseArray};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use trace_core::code2vec::*;
use trace_core::ehr::{CodeVocabulary, PatientRecord, Visit};

fn patient(id: u64, visits: Vec<Vec<usize>>) -> PatientRecord {
    PatientRecord {
        id,
        race: 0,
        gender: 0,
        label: 0,
        visits: visits
            .into_iter()
            .enumerate()
            .map(|(t, c)| Visit {
                code_indices: c,
                observation_indices: vec![],
                admit_day: t as u32,
                age_years: 50.0,
            })
            .collect(),
    }
}

/// Codes 0 and 1 always appear together. The other codes form topics of
/// three; a patient stays on one topic and each visit draws one code from it
/// plus one code from anywhere.
fn planted_corpus(seed: u64, n_patients: usize, vocab: usize) -> Vec<PatientRecord> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n_topics = (vocab - 2) / 3;
    (0..n_patients as u64)
        .map(|id| {
            let topic = rng.random_range(0..n_topics);
            let visits = (0..5)
                .map(|_| {
                    let mut codes = std::collections::BTreeSet::new();
                    codes.insert(2 + 3 * topic + rng.random_range(0..3));
                    codes.insert(rng.random_range(2..2 + 3 * n_topics));
                    if rng.random_bool(0.4) {
                        codes.extend([0, 1]);
                    }
                    codes.into_iter().collect()
                })
                .collect();
            patient(id, visits)
        })
        .collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn percentile_95(table: &DenseArray) -> f64 {
    let mut sims = Vec::new();
    for i in 2..table.rows() {
        for j in i + 1..table.rows() {
            sims.push(cosine(table.row(i), table.row(j)));
        }
    }
    sims.sort_by(|a, b| a.partial_cmp(b).unwrap());
    sims[(sims.len() as f64 * 0.95) as usize]
}

fn config(epochs: usize) -> Code2VecConfig {
    Code2VecConfig {
        dim: 64,
        epochs,
        batch_size: 5,
        ..Default::default()
    }
}

#[test]
fn window_count_on_a_regular_corpus() {
    let corpus: Vec<_> = (0..100)
        .map(|id| patient(id, (0..5).map(|t| vec![t % 3]).collect()))
        .collect();
    assert_eq!(build_visit_windows(&corpus, 1).len(), 500);
    let mut sparse = corpus.clone();
    sparse.push(patient(100, vec![vec![0]]));
    assert_eq!(build_visit_windows(&sparse, 1).len(), 500);
}

#[test]
fn co_occurring_codes_end_up_similar() {
    let vocab = 30;
    let instances = build_visit_windows(&planted_corpus(1, 200, vocab), 1);
    let outcome = train_code_embeddings(&instances, vocab, &config(100), &Adadelta::default(), 3).unwrap();
    let table = outcome.store.value(outcome.store.id(TABLE_PARAM).unwrap());
    let pair = cosine(table.row(0), table.row(1));
    let p95 = percentile_95(table);
    assert!(pair > p95, "pair {pair} vs 95th percentile {p95}");
}

#[test]
fn loss_falls_over_ten_epochs() {
    let instances = build_visit_windows(&planted_corpus(2, 200, 30), 1);
    assert!(instances.len() >= 1000);
    let outcome = train_code_embeddings(&instances[..1000], 30, &config(10), &Adadelta::default(), 4).unwrap();
    assert_eq!(outcome.loss_curve.len(), 11);
    assert!(outcome.loss_curve[10] < outcome.loss_curve[0]);
}

#[test]
fn training_is_reproducible() {
    let instances = build_visit_windows(&planted_corpus(3, 30, 12), 1);
    let run = |seed| {
        let o = train_code_embeddings(&instances, 12, &config(2), &Adadelta::default(), seed).unwrap();
        (o.loss_curve, o.store.hash())
    };
    assert_eq!(run(5), run(5));
    assert_ne!(run(5).1, run(6).1);
}

#[test]
fn empty_instances_are_rejected() {
    assert!(train_code_embeddings(&[], 4, &config(1), &Adadelta::default(), 0).is_err());
}

fn aligned_table() -> (AlignmentMap, DenseArray) {
    let pretrain = CodeVocabulary::new((0..6).map(|i| format!("dx-{i}")).collect(), 1).unwrap();
    let experiment =
        CodeVocabulary::new(["dx-1", "dx-3", "dx-5", "dx-9", "px-0"].map(String::from).to_vec(), 1).unwrap();
    let map = AlignmentMap::build(&experiment, &pretrain);
    let table = DenseArray::new(vec![6, 3], (0..18).map(|v| v as f64 * 0.5 - 3.0).collect()).unwrap();
    (map.clone(), map.materialize(&table).unwrap())
}

#[test]
fn all_oov_visit_embeds_to_zero() {
    let (map, table) = aligned_table();
    assert_eq!(map.oov_count(), 2);
    let oov: Vec<usize> = map
        .entries
        .iter()
        .enumerate()
        .filter(|(_, e)| e.pretrain_index.is_none())
        .map(|(i, _)| i)
        .collect();
    let mut x = vec![0.0; 5];
    for i in oov {
        x[i] = 1.0;
    }
    assert_eq!(embed_codes(&x, &table).unwrap(), vec![0.0; 3]);
}

proptest! {
    #[test]
    fn embedding_is_linear_and_ignores_oov(a in prop::collection::vec(any::<bool>(), 5), b in prop::collection::vec(any::<bool>(), 5)) {
        let (map, table) = aligned_table();
        let xa: Vec<f64> = a.iter().map(|&v| f64::from(u8::from(v))).collect();
        // disjoint support for the second vector
        let xb: Vec<f64> = b.iter().zip(&a).map(|(&v, &u)| f64::from(u8::from(v && !u))).collect();
        let sum: Vec<f64> = xa.iter().zip(&xb).map(|(p, q)| p + q).collect();
        let ea = embed_codes(&xa, &table).unwrap();
        let eb = embed_codes(&xb, &table).unwrap();
        let es = embed_codes(&sum, &table).unwrap();
        for k in 0..3 {
            prop_assert!((es[k] - ea[k] - eb[k]).abs() < 1e-12);
        }
        let mut with_oov = xa.clone();
        for (i, e) in map.entries.iter().enumerate() {
            if e.pretrain_index.is_none() {
                with_oov[i] = 1.0;
            }
        }
        prop_assert_eq!(embed_codes(&with_oov, &table).unwrap(), ea);
    }
}
