#![allow(dead_code)]

use numkit::{DenseArray, Gru, ParamStore};
use trace_core::autoencoder::AeDims;
use trace_core::cohort::Split;
use trace_core::dataset::{PreparedVisit, Sample};
use trace_core::ehr::{FeatureLayout, VisitVector};

pub fn layout(n_codes: usize, n_obs: usize) -> FeatureLayout {
    FeatureLayout {
        n_codes,
        n_obs,
        n_races: 2,
        n_genders: 2,
    }
}

pub fn dims(layout: FeatureLayout, n_reduced: usize, d: usize) -> AeDims {
    AeDims {
        layout,
        n_reduced,
        d_z: d,
        d_emb: d,
        d_ff: 4 * d,
        d_h: d,
        dropout: 0.5,
    }
}

pub struct VisitSpec<'a> {
    pub codes: &'a [usize],
    pub obs: &'a [usize],
    pub race: usize,
    pub gender: usize,
    pub age: f64,
    pub day: u32,
}

pub fn visit(l: FeatureLayout, s: VisitSpec) -> PreparedVisit {
    let mut x = vec![0.0; l.n_codes];
    for &c in s.codes {
        x[c] = 1.0;
    }
    let mut d = vec![0.0; l.n_other()];
    for &o in s.obs {
        d[o] = 1.0;
    }
    d[l.n_obs + s.race] = 1.0;
    d[l.n_obs + l.n_races + s.gender] = 1.0;
    d[l.n_obs + l.n_demographic()] = s.age.ln_1p();
    d[l.n_obs + l.n_demographic() + 1] = f64::from(s.day).ln_1p();
    PreparedVisit::new(VisitVector { x, d })
}

pub fn simple_visit(l: FeatureLayout, codes: &[usize], obs: &[usize], day: u32) -> PreparedVisit {
    visit(
        l,
        VisitSpec {
            codes,
            obs,
            race: 0,
            gender: 1,
            age: 60.0,
            day,
        },
    )
}

pub fn sample(id: u64, label: u8, visits: Vec<PreparedVisit>) -> Sample {
    Sample {
        id,
        label,
        split: Split::Train,
        visits,
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `y = x·W` for a row vector.
pub fn vec_mat(x: &[f64], w: &DenseArray) -> Vec<f64> {
    (0..w.cols())
        .map(|j| (0..w.rows()).map(|i| x[i] * w.get(i, j)).sum())
        .collect()
}

pub fn mat_mul(a: &DenseArray, b: &DenseArray) -> Vec<Vec<f64>> {
    (0..a.rows())
        .map(|i| {
            (0..b.cols())
                .map(|j| (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum())
                .collect()
        })
        .collect()
}

/// One gated recurrent step computed from the stored weights.
pub fn gru_oracle(store: &ParamStore, cell: &Gru, h: &[f64], x: &[f64]) -> Vec<f64> {
    let gate = |k: usize, hh: &[f64]| -> Vec<f64> {
        let xw = vec_mat(x, store.value(cell.w[k]));
        let hu = vec_mat(hh, store.value(cell.u[k]));
        let b = store.value(cell.b[k]).values();
        (0..h.len()).map(|j| xw[j] + hu[j] + b[j]).collect()
    };
    let z: Vec<f64> = gate(0, h).into_iter().map(sigmoid).collect();
    let r: Vec<f64> = gate(1, h).into_iter().map(sigmoid).collect();
    let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
    let n: Vec<f64> = gate(2, &rh).into_iter().map(f64::tanh).collect();
    (0..h.len()).map(|j| (1.0 - z[j]) * h[j] + z[j] * n[j]).collect()
}

pub fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "element {i}: {x} vs {y}");
    }
}
