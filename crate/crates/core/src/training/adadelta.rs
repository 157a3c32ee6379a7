use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ParamSet;

pub const DEFAULT_RHO: f64 = 0.95;
pub const DEFAULT_EPS: f64 = 1e-6;
pub const DEFAULT_LR: f64 = 1.0;

/// Adadelta with running averages shaped like the parameters they track.
///
/// Per coordinate:
/// `E[g²] ← ρ E[g²] + (1-ρ) g²`,
/// `Δ = -lr · sqrt(E[Δx²] + ε) / sqrt(E[g²] + ε) · g`,
/// `E[Δx²] ← ρ E[Δx²] + (1-ρ) Δ²`, `x ← x + Δ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adadelta<P> {
    pub sq_grad: P,
    pub sq_update: P,
    pub rho: f64,
    pub eps: f64,
    pub lr: f64,
    pub steps: u64,
}

impl<P: ParamSet + Clone> Adadelta<P> {
    pub fn new(params: &P) -> Self {
        Self::with_hyper(params, DEFAULT_RHO, DEFAULT_EPS, DEFAULT_LR)
    }

    pub fn with_hyper(params: &P, rho: f64, eps: f64, lr: f64) -> Self {
        Adadelta {
            sq_grad: params.zeros_like(),
            sq_update: params.zeros_like(),
            rho,
            eps,
            lr,
            steps: 0,
        }
    }

    /// Applies one update. A gradient with any non-finite entry is rejected
    /// and leaves both the parameters and the accumulators untouched.
    pub fn step(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let g = grads.flatten();
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NumericFailure(format!(
                "non-finite gradient at coordinate {i}; update skipped"
            )));
        }
        let mut x = params.flatten();
        if x.len() != g.len() {
            return Err(Error::invalid("gradient layout does not match parameters"));
        }
        let mut eg2 = self.sq_grad.flatten();
        let mut edx2 = self.sq_update.flatten();
        let (rho, eps, lr) = (self.rho, self.eps, self.lr);
        for i in 0..x.len() {
            eg2[i] = rho * eg2[i] + (1.0 - rho) * g[i] * g[i];
            let dx = -lr * ((edx2[i] + eps).sqrt() / (eg2[i] + eps).sqrt()) * g[i];
            edx2[i] = rho * edx2[i] + (1.0 - rho) * dx * dx;
            x[i] += dx;
        }
        params.assign_flat(&x)?;
        self.sq_grad.assign_flat(&eg2)?;
        self.sq_update.assign_flat(&edx2)?;
        self.steps += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Vector;

    #[test]
    fn zero_gradient_only_decays() {
        let mut p = Vector::from(vec![1.0, -2.0]);
        let mut opt = Adadelta::new(&p);
        opt.sq_grad = vec![4.0, 1.0].into();
        opt.sq_update = vec![2.0, 0.5].into();
        opt.step(&mut p, &Vector::zeros(2)).unwrap();
        assert_eq!(p.to_vec(), vec![1.0, -2.0]);
        assert_eq!(opt.sq_grad.to_vec(), vec![0.95 * 4.0, 0.95 * 1.0]);
        assert_eq!(opt.sq_update.to_vec(), vec![0.95 * 2.0, 0.95 * 0.5]);
    }

    #[test]
    fn first_step_value() {
        let mut p = Vector::zeros(1);
        let mut opt = Adadelta::new(&p);
        opt.step(&mut p, &Vector::from(vec![1.0])).unwrap();
        assert!((opt.sq_grad[0] - 0.05).abs() < 1e-15);
        let expect = -(1e-6f64).sqrt() / (0.050001f64).sqrt();
        assert!((p[0] - expect).abs() < 1e-15);
        assert!((p[0] + 0.0044721).abs() < 1e-7);
    }

    #[test]
    fn update_opposes_gradient() {
        let mut p = Vector::zeros(4);
        let mut opt = Adadelta::new(&p);
        let g = Vector::from(vec![3.0, -0.2, 1e-4, -7.0]);
        opt.step(&mut p, &g).unwrap();
        for (d, gi) in p.iter().zip(g.iter()) {
            assert!(d * gi < 0.0);
        }
    }

    #[test]
    fn non_finite_gradient_skipped() {
        let mut p = Vector::from(vec![1.0, 1.0]);
        let mut opt = Adadelta::new(&p);
        let before = (p.clone(), opt.clone());
        let err = opt.step(&mut p, &Vector::from(vec![f64::NAN, 1.0]));
        assert!(matches!(err, Err(Error::NumericFailure(_))));
        assert_eq!(p, before.0);
        assert_eq!(opt, before.1);
    }
}
