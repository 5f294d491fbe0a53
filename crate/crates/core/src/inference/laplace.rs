//! Laplace approximation of the log marginal posterior of the hyperparameters.

use super::inner::{inner_fit, GaussianApprox, InnerSettings};
use crate::error::Result;
use crate::model::{Hyperparameters, Model};

/// Box on the unconstrained scale inside which the marginal is evaluated.
pub const LOG_SIGMA_RANGE: (f64, f64) = (-8.0, 4.0);
pub const LOGIT_PHI_RANGE: (f64, f64) = (-9.0, 9.0);
const OUTSIDE_PENALTY: f64 = 1e3;

#[derive(Debug, Clone)]
pub struct MarginalEvaluation {
    /// Unconstrained hyperparameters actually used (clamped to the box).
    pub theta: Vec<f64>,
    pub value: f64,
    pub approx: GaussianApprox,
}

/// `log p(y | x*) + log p(x* | θ) + log π(θ) - log p̃_G(x* | y, θ)` with the
/// hyperprior on the unconstrained scale.
pub fn marginal_log_posterior(
    model: &Model,
    hyper: &Hyperparameters,
    start: Option<&[f64]>,
    settings: &InnerSettings,
) -> Result<MarginalEvaluation> {
    let theta = model.hyper_to_internal(hyper);
    evaluate_internal(model, &theta, start, settings)
}

/// Clamp to the evaluation box; returns the clamped point and the squared
/// distance moved.
pub fn clamp_theta(model: &Model, theta: &[f64]) -> (Vec<f64>, f64) {
    let hl = &model.hyper_layout;
    let mut out = theta.to_vec();
    let mut dist = 0.0;
    for (i, v) in out.iter_mut().enumerate() {
        let (lo, hi) = if hl.phi.contains(&i) { LOGIT_PHI_RANGE } else { LOG_SIGMA_RANGE };
        let c = v.clamp(lo, hi);
        dist += (*v - c) * (*v - c);
        *v = c;
    }
    (out, dist)
}

/// Marginal at an unconstrained point. Outside the evaluation box the value
/// at the nearest box point is returned minus a quadratic penalty.
pub fn evaluate_internal(
    model: &Model,
    theta: &[f64],
    start: Option<&[f64]>,
    settings: &InnerSettings,
) -> Result<MarginalEvaluation> {
    let (clamped, dist) = clamp_theta(model, theta);
    let hyper = model.hyper_from_internal(&clamped);
    let approx = inner_fit(model, &hyper, start, settings)?;
    let value = approx.log_likelihood + approx.log_prior + model.log_hyperprior(&clamped) - approx.log_density_at_mode
        - OUTSIDE_PENALTY * dist;
    Ok(MarginalEvaluation {
        theta: clamped,
        value,
        approx,
    })
}
