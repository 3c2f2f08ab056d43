//! Finite-difference checks of every taped operator in isolation.
//!
//! Each case registers its differentiable inputs as parameters, applies one
//! operator and reduces the output to a scalar through a fixed random
//! weighting, so every output element contributes a distinct gradient.

use rand::Rng;

use crate::array::DenseArray;
use crate::error::Result;
use crate::gradcheck::{finite_diff_check, GradCheckOptions, GradCheckReport};
use crate::nn::Gru;
use crate::params::{Init, ParamId, ParamStore};
use crate::tape::{Activation, DropoutMode, LossKind, Tape, Var};
use crate::{derive_seed, seeded_rng};

pub struct OpCheck {
    pub op: &'static str,
    pub report: GradCheckReport,
}

fn random_array(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> DenseArray {
    let n: usize = shape.iter().product();
    DenseArray::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
        .expect("valid shape")
}

/// Values bounded away from zero so relu kinks are never straddled.
fn away_from_zero(rng: &mut impl Rng, shape: &[usize]) -> DenseArray {
    let mut a = random_array(rng, shape, 0.1, 1.5);
    for v in a.values_mut() {
        if rng.random::<bool>() {
            *v = -*v;
        }
    }
    a
}

fn weighted_sum(tape: &mut Tape, y: Var, weights: &DenseArray) -> Result<Var> {
    let w = tape.constant(weights.reshaped(tape.value(y).shape())?);
    let prod = tape.mul(y, w)?;
    Ok(tape.sum_all(prod))
}

struct Case {
    op: &'static str,
    store: ParamStore,
    ids: Vec<ParamId>,
    weights: DenseArray,
    out_len: usize,
}

fn run_case<F>(mut case: Case, opts: GradCheckOptions, f: F) -> Result<OpCheck>
where
    F: Fn(&mut Tape, &ParamStore, &[ParamId]) -> Result<Var>,
{
    let ids = case.ids.clone();
    let weights = case.weights.clone();
    let len = case.out_len;
    let report = finite_diff_check(
        &mut case.store,
        |s| {
            let mut tape = Tape::new();
            let y = f(&mut tape, s, &ids)?;
            let out = if len == 1 {
                y
            } else {
                weighted_sum(&mut tape, y, &weights)?
            };
            Ok((tape, out))
        },
        opts,
    )?;
    Ok(OpCheck {
        op: case.op,
        report,
    })
}

fn case(
    op: &'static str,
    rng: &mut impl Rng,
    inputs: Vec<(&str, DenseArray)>,
    out_len: usize,
) -> Result<Case> {
    let mut store = ParamStore::new();
    let mut ids = Vec::new();
    for (name, value) in inputs {
        ids.push(store.add(name, value)?);
    }
    let weights = random_array(rng, &[out_len], -1.0, 1.0);
    Ok(Case {
        op,
        store,
        ids,
        weights,
        out_len,
    })
}

/// Runs the gradient check for every operator; `tolerance` applies to all.
pub fn check_all_ops(seed: u64, tolerance: f64) -> Result<Vec<OpCheck>> {
    let mut rng = seeded_rng(seed);
    let opts = GradCheckOptions {
        step: 1e-5,
        tolerance,
        max_elements_per_param: None,
    };
    let mut out = Vec::new();

    let a = random_array(&mut rng, &[3, 4], -1.0, 1.0);
    let b = random_array(&mut rng, &[4, 2], -1.0, 1.0);
    let c = case("matmul", &mut rng, vec![("a", a), ("b", b)], 6)?;
    out.push(run_case(c, opts, |t, s, ids| {
        let (a, b) = (t.param(s, ids[0]), t.param(s, ids[1]));
        t.matmul(a, b)
    })?);

    let a = random_array(&mut rng, &[3, 4], -1.0, 1.0);
    let b = random_array(&mut rng, &[5, 4], -1.0, 1.0);
    let c = case("matmul_bt", &mut rng, vec![("a", a), ("b", b)], 15)?;
    out.push(run_case(c, opts, |t, s, ids| {
        let (a, b) = (t.param(s, ids[0]), t.param(s, ids[1]));
        t.matmul_bt(a, b)
    })?);

    let a = random_array(&mut rng, &[3, 4], -1.0, 1.0);
    let c = case("transpose", &mut rng, vec![("a", a)], 12)?;
    out.push(run_case(c, opts, |t, s, ids| {
        let a = t.param(s, ids[0]);
        t.transpose(a)
    })?);

    for (name, kind) in [
        ("add", 0u8),
        ("sub", 1),
        ("mul", 2),
    ] {
        let a = random_array(&mut rng, &[2, 3], -1.0, 1.0);
        let b = random_array(&mut rng, &[2, 3], -1.0, 1.0);
        let c = case(name, &mut rng, vec![("a", a), ("b", b)], 6)?;
        out.push(run_case(c, opts, move |t, s, ids| {
            let (a, b) = (t.param(s, ids[0]), t.param(s, ids[1]));
            match kind {
                0 => t.add(a, b),
                1 => t.sub(a, b),
                _ => t.mul(a, b),
            }
        })?);
    }

    let x = random_array(&mut rng, &[3, 4], -1.0, 1.0);
    let bias = random_array(&mut rng, &[4], -1.0, 1.0);
    let c = case("add_row_bias", &mut rng, vec![("x", x), ("b", bias)], 12)?;
    out.push(run_case(c, opts, |t, s, ids| {
        let (x, b) = (t.param(s, ids[0]), t.param(s, ids[1]));
        t.add_row_bias(x, b)
    })?);

    let x = random_array(&mut rng, &[5], -1.0, 1.0);
    let c = case("scale", &mut rng, vec![("x", x)], 5)?;
    out.push(run_case(c, opts, |t, s, ids| {
        let x = t.param(s, ids[0]);
        Ok(t.scale(x, -1.7))
    })?);

    for (name, kind) in [
        ("sigmoid", Activation::Sigmoid),
        ("tanh", Activation::Tanh),
        ("relu", Activation::Relu),
    ] {
        let x = away_from_zero(&mut rng, &[2, 4]);
        let c = case(name, &mut rng, vec![("x", x)], 8)?;
        out.push(run_case(c, opts, move |t, s, ids| {
            let x = t.param(s, ids[0]);
            Ok(t.activation(kind, x))
        })?);
    }

    let x = random_array(&mut rng, &[3, 5], -2.0, 2.0);
    let c = case("softmax_rows", &mut rng, vec![("x", x)], 15)?;
    out.push(run_case(c, opts, |t, s, ids| {
        let x = t.param(s, ids[0]);
        Ok(t.softmax_rows(x))
    })?);

    let x = random_array(&mut rng, &[3, 5], -2.0, 2.0);
    let g = random_array(&mut rng, &[5], 0.5, 1.5);
    let bb = random_array(&mut rng, &[5], -0.5, 0.5);
    let c = case("layer_norm_rows", &mut rng, vec![("x", x), ("g", g), ("b", bb)], 15)?;
    out.push(run_case(c, opts, |t, s, ids| {
        let (x, g, b) = (t.param(s, ids[0]), t.param(s, ids[1]), t.param(s, ids[2]));
        t.layer_norm_rows(x, g, b)
    })?);

    let x = random_array(&mut rng, &[4, 6], -1.0, 1.0);
    let mask_seed = rng.random::<u64>();
    let c = case("dropout", &mut rng, vec![("x", x)], 24)?;
    out.push(run_case(c, opts, move |t, s, ids| {
        let x = t.param(s, ids[0]);
        let mut r = seeded_rng(mask_seed);
        t.dropout(x, 0.5, DropoutMode::Train, &mut r)
    })?);

    let w = random_array(&mut rng, &[4, 3], -1.0, 1.0);
    let x = random_array(&mut rng, &[4], -1.0, 1.0);
    let c = case("scale_rows", &mut rng, vec![("w", w), ("x", x)], 12)?;
    out.push(run_case(c, opts, |t, s, ids| {
        let (w, x) = (t.param(s, ids[0]), t.param(s, ids[1]));
        t.scale_rows(w, x)
    })?);

    let x = random_array(&mut rng, &[5, 3], -1.0, 1.0);
    let c = case("mean_pool_rows", &mut rng, vec![("x", x)], 3)?;
    out.push(run_case(c, opts, |t, s, ids| {
        let x = t.param(s, ids[0]);
        t.mean_pool_rows(x)
    })?);

    let a = random_array(&mut rng, &[3], -1.0, 1.0);
    let b = random_array(&mut rng, &[2, 2], -1.0, 1.0);
    let c = case("concat_reshape_stack", &mut rng, vec![("a", a), ("b", b)], 14)?;
    out.push(run_case(c, opts, |t, s, ids| {
        let (a, b) = (t.param(s, ids[0]), t.param(s, ids[1]));
        let flat = t.reshape(b, &[4])?;
        let joined = t.concat(&[a, flat])?;
        let sum = t.add_n(&[joined, joined])?;
        let stacked = t.stack_rows(&[sum, joined])?;
        t.reshape(stacked, &[14])
    })?);

    let x = random_array(&mut rng, &[4, 5], -1.0, 1.0);
    let c = case("gather_rows_cols", &mut rng, vec![("x", x)], 9)?;
    out.push(run_case(c, opts, |t, s, ids| {
        let x = t.param(s, ids[0]);
        let rows = t.gather_rows(x, &[3, 1, 3])?;
        t.gather_cols(rows, &[0, 4, 2])
    })?);

    // losses end in a scalar already
    let logits = random_array(&mut rng, &[5], -2.0, 2.0);
    let mut c = case("loss_ce_softmax", &mut rng, vec![("z", logits)], 1)?;
    c.weights = DenseArray::vector(vec![0.1, 0.0, 0.5, 0.15, 0.25]);
    out.push(run_case(c, opts, |t, s, ids| {
        let z = t.param(s, ids[0]);
        let target = DenseArray::vector(vec![0.1, 0.0, 0.5, 0.15, 0.25]);
        t.loss(LossKind::CeSoftmax, z, &target)
    })?);

    let p = random_array(&mut rng, &[4], 0.1, 0.9);
    let c = case("loss_bce", &mut rng, vec![("p", p)], 1)?;
    out.push(run_case(c, opts, |t, s, ids| {
        let p = t.param(s, ids[0]);
        t.loss(LossKind::Bce, p, &DenseArray::vector(vec![1.0, 0.0, 0.3, 1.0]))
    })?);

    let p = random_array(&mut rng, &[4], -1.0, 1.0);
    let c = case("loss_mse", &mut rng, vec![("p", p)], 1)?;
    out.push(run_case(c, opts, |t, s, ids| {
        let p = t.param(s, ids[0]);
        t.loss(LossKind::Mse, p, &DenseArray::vector(vec![0.5, -0.2, 0.0, 2.0]))
    })?);

    // gated recurrence, two steps so the state path is exercised
    let mut store = ParamStore::new();
    let mut init_rng = seeded_rng(derive_seed(seed, 17));
    let cell = Gru::register(&mut store, "gru", 3, 4, &mut init_rng)?;
    for name in ["b_z", "b_r", "b_n"] {
        let id = store.id(&format!("gru.{name}"))?;
        let v = crate::params::init_array(&[4], Init::Glorot, &mut init_rng);
        store.get_mut(id).value = v;
    }
    let x0 = random_array(&mut rng, &[3], -1.0, 1.0);
    let x1 = random_array(&mut rng, &[3], -1.0, 1.0);
    let weights = random_array(&mut rng, &[4], -1.0, 1.0);
    let report = finite_diff_check(
        &mut store,
        |s| {
            let mut t = Tape::new();
            let inputs = [t.constant(x0.clone()), t.constant(x1.clone())];
            let states = cell.unroll(&mut t, s, &inputs)?;
            let out = weighted_sum(&mut t, states[1], &weights)?;
            Ok((t, out))
        },
        opts,
    )?;
    out.push(OpCheck {
        op: "gru_step",
        report,
    });

    Ok(out)
}
