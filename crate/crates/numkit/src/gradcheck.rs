//! Central finite-difference verification of tape gradients.

use crate::error::{NumError, Result};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// `|a − n| / max(1e-8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many evenly spaced elements per parameter.
    pub max_elements_per_param: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            max_elements_per_param: None,
        }
    }
}

/// Compares the tape gradient of `loss_fn` with central differences for
/// every parameter in `store`.
///
/// `loss_fn` must be deterministic; two differing evaluations at the same
/// point are reported as a contract violation. Gradients in `store` are
/// zeroed on return.
pub fn finite_diff_check<F>(
    store: &mut ParamStore,
    mut loss_fn: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<(Tape, Var)>,
{
    let eval = |f: &mut F, s: &ParamStore| -> Result<f64> {
        let (tape, out) = f(s)?;
        Ok(tape.scalar(out))
    };

    store.zero_grads();
    let (tape, out) = loss_fn(store)?;
    let again = eval(&mut loss_fn, store)?;
    if tape.scalar(out).to_bits() != again.to_bits() {
        return Err(NumError::Contract(format!(
            "loss closure is not deterministic ({} vs {again})",
            tape.scalar(out)
        )));
    }
    tape.backward(out, store)?;
    let analytic: Vec<Vec<f64>> = store
        .iter()
        .map(|(_, p)| p.gradient.values().to_vec())
        .collect();
    store.zero_grads();

    let h = opts.step;
    let mut report = Vec::with_capacity(store.len());
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for (pi, id) in ids.into_iter().enumerate() {
        let n = store.value(id).len();
        let stride = match opts.max_elements_per_param {
            Some(cap) if cap > 0 && n > cap => n.div_ceil(cap),
            _ => 1,
        };
        let mut check = ParamCheck {
            name: store.get(id).name.clone(),
            checked: 0,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
        };
        for e in (0..n).step_by(stride) {
            let original = store.value(id).values()[e];
            store.get_mut(id).value.values_mut()[e] = original + h;
            let plus = eval(&mut loss_fn, store)?;
            store.get_mut(id).value.values_mut()[e] = original - h;
            let minus = eval(&mut loss_fn, store)?;
            store.get_mut(id).value.values_mut()[e] = original;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[pi][e];
            check.max_rel_error = check.max_rel_error.max(relative_error(a, numeric));
            check.max_abs_error = check.max_abs_error.max((a - numeric).abs());
            check.checked += 1;
        }
        report.push(check);
    }
    Ok(GradCheckReport {
        params: report,
        tolerance: opts.tolerance,
    })
}
