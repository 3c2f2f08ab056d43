//! Adadelta.

use crate::error::{NumError, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adadelta {
    pub rho: f64,
    pub eps: f64,
    pub lr: f64,
}

impl Default for Adadelta {
    fn default() -> Self {
        Self {
            rho: 0.95,
            eps: 1e-6,
            lr: 1.0,
        }
    }
}

impl Adadelta {
    pub fn new(rho: f64, eps: f64, lr: f64) -> Result<Self> {
        if !(rho > 0.0 && rho < 1.0) {
            return Err(NumError::Config(format!("adadelta rho {rho} outside (0,1)")));
        }
        if !(eps > 0.0) || !(lr > 0.0) {
            return Err(NumError::Config("adadelta eps and lr must be positive".into()));
        }
        Ok(Self { rho, eps, lr })
    }

    /// Applies one update to every parameter and zeroes the gradients.
    ///
    /// Per element: `E[g²] ← ρE[g²] + (1−ρ)g²`,
    /// `Δ = −√(E[Δ²]+ε)/√(E[g²]+ε) · g`, `w ← w + lr·Δ`,
    /// `E[Δ²] ← ρE[Δ²] + (1−ρ)Δ²`.
    pub fn step(&self, store: &mut ParamStore) -> Result<()> {
        if let Some(name) = store.first_non_finite() {
            return Err(NumError::NonFinite(format!("parameter or gradient `{name}`")));
        }
        for (_, p) in store.iter() {
            if p.gradient.shape() != p.value.shape() {
                return Err(NumError::Contract(format!("gradient of `{}` is missing", p.name)));
            }
        }
        let Self { rho, eps, lr } = *self;
        for p in store.iter_mut() {
            let g = p.gradient.values_mut();
            let sq_g = p.sq_grad.values_mut();
            let sq_u = p.sq_update.values_mut();
            let w = p.value.values_mut();
            for i in 0..w.len() {
                sq_g[i] = rho * sq_g[i] + (1.0 - rho) * g[i] * g[i];
                let delta = -((sq_u[i] + eps).sqrt() / (sq_g[i] + eps).sqrt()) * g[i];
                w[i] += lr * delta;
                sq_u[i] = rho * sq_u[i] + (1.0 - rho) * delta * delta;
                g[i] = 0.0;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::DenseArray;

    fn scalar_store(w: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", DenseArray::scalar(w)).unwrap();
        s
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut s = scalar_store(0.7);
        Adadelta::default().step(&mut s).unwrap();
        assert_eq!(s.iter().next().unwrap().1.value.item(), 0.7);
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        let mut s = scalar_store(0.0);
        s.iter_mut().next().unwrap().gradient.values_mut()[0] = 1.0;
        Adadelta::default().step(&mut s).unwrap();
        let p = s.iter().next().unwrap().1;
        // -sqrt(1e-6)/sqrt(0.05 + 1e-6)
        let expected = -(1e-6f64).sqrt() / (0.05f64 + 1e-6).sqrt();
        assert!((p.value.item() - expected).abs() < 1e-15);
        assert!((p.value.item() + 4.4721e-3).abs() < 1e-7);
        assert_eq!(p.gradient.item(), 0.0);
        assert!(p.sq_grad.item() >= 0.0 && p.sq_update.item() >= 0.0);
    }

    #[test]
    fn rejects_bad_rho() {
        assert!(Adadelta::new(1.0, 1e-6, 1.0).is_err());
        assert!(Adadelta::new(0.0, 1e-6, 1.0).is_err());
    }

    #[test]
    fn non_finite_gradient_is_reported_by_name() {
        let mut s = scalar_store(0.0);
        s.iter_mut().next().unwrap().gradient.values_mut()[0] = f64::NAN;
        let err = Adadelta::default().step(&mut s).unwrap_err();
        assert!(err.to_string().contains("`w`"));
    }
}
