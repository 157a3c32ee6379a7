//! Analytic gradients against central finite differences of the full loss.

use crate::data::Sample;
use crate::encoder::{BoundaryMode, Phase};
use crate::error::{Error, Result};
use crate::numerics::{finite_diff_grad, ParamSet, Rng};

use super::{forward, model_backward, ModelParams};

/// Finite-difference step used by [`grad_check`].
pub const FD_EPS: f64 = 1e-5;

/// Norms below this count as zero when comparing tensors.
pub const ZERO_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradCheckMode {
    /// Sample boundary decisions once, then hold them fixed.
    FrozenBoundary,
    /// Replace the step function by the sigmoid everywhere.
    SoftRelaxation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Relative error of the whole flattened gradient.
    pub max_rel_error: f64,
    /// `(tensor path, relative error of that tensor alone)` in traversal
    /// order. Tensors with small gradients sit near the finite-difference
    /// rounding floor, so these run higher than the overall figure.
    pub per_tensor: Vec<(String, f64)>,
    /// Decisions the frozen check replayed; empty for the soft check.
    pub decisions: Vec<bool>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&(String, f64)> {
        self.per_tensor
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, or 0 when both norms are below [`ZERO_NORM`].
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let (na, nn) = (norm(analytic), norm(numeric));
    if na < ZERO_NORM && nn < ZERO_NORM {
        return 0.0;
    }
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    diff / na.max(nn)
}

/// Compares the backward pass with central differences (step [`FD_EPS`])
/// of the caption loss. No dropout is applied.
pub fn grad_check(
    model: &ModelParams,
    sample: &Sample,
    mode: GradCheckMode,
    rng: &mut Rng,
) -> Result<GradCheckReport> {
    let (boundary_mode, decisions) = match mode {
        GradCheckMode::FrozenBoundary => {
            let sampled = forward(
                model,
                &sample.features,
                &sample.caption,
                &BoundaryMode::Learned(Phase::Train),
                Some(rng),
                None,
            )?;
            let d = sampled.decisions();
            (BoundaryMode::Forced(d.clone()), d)
        }
        GradCheckMode::SoftRelaxation => (BoundaryMode::Relaxed, Vec::new()),
    };

    let pass = forward(model, &sample.features, &sample.caption, &boundary_mode, None, None)?;
    let mut analytic = model.zeros_like();
    model_backward(model, &sample.features, &pass, 1.0, &mut analytic)?;

    let mut failure = None;
    let numeric = finite_diff_grad(
        |p: &ModelParams| match forward(p, &sample.features, &sample.caption, &boundary_mode, None, None) {
            Ok(f) => f.loss,
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        },
        model,
        FD_EPS,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let numeric = numeric?;

    let mut tensors_a = Vec::new();
    analytic.visit("", &mut |name, _, d| tensors_a.push((name.to_string(), d.to_vec())));
    let mut tensors_n = Vec::new();
    numeric.visit("", &mut |_, _, d| tensors_n.push(d.to_vec()));
    let per_tensor: Vec<(String, f64)> = tensors_a
        .into_iter()
        .zip(&tensors_n)
        .map(|((name, a), n)| {
            let e = relative_error(&a, n);
            (name, e)
        })
        .collect();
    if per_tensor.iter().any(|(_, e)| !e.is_finite()) {
        return Err(Error::NumericFailure("non-finite gradient in check".into()));
    }
    let max_rel_error = relative_error(&analytic.flatten(), &numeric.flatten());
    if !max_rel_error.is_finite() {
        return Err(Error::NumericFailure("non-finite gradient in check".into()));
    }
    Ok(GradCheckReport {
        max_rel_error,
        per_tensor,
        decisions,
    })
}
