//! Empirical-Bayes fit: hyperparameter optimisation followed by the
//! Gaussian approximation at the optimum, with posterior summaries.

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::inner::InnerSettings;
use super::laplace::evaluate_internal;
use super::optimize::{optimize_hyper, OptimizerSettings};
use crate::data::MortalityDataset;
use crate::error::{Error, Result};
use crate::graph::SpatialGraph;
use crate::model::{Hyperparameters, Model, ModelSpec, Variant};

/// Marginal posterior summary of one quantity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q50: f64,
    pub q975: f64,
}

impl Summary {
    /// Gaussian marginal: interval `mean ± 1.96·sd`.
    pub fn gaussian(mean: f64, sd: f64) -> Self {
        Self {
            mean,
            sd,
            q025: mean - 1.96 * sd,
            q50: mean,
            q975: mean + 1.96 * sd,
        }
    }

    /// Sample moments and linearly interpolated empirical quantiles.
    pub fn empirical(samples: &mut [f64]) -> Self {
        let n = samples.len();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        samples.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
        Self {
            mean,
            sd: var.sqrt(),
            q025: quantile(samples, 0.025),
            q50: quantile(samples, 0.5),
            q975: quantile(samples, 0.975),
        }
    }
}

/// Quantile of sorted data with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitSettings {
    pub inner: InnerSettings,
    pub optimizer: OptimizerSettings,
    /// Draws used for the `β_xκ_t` summaries.
    pub n_samples: usize,
    pub seed: u64,
    /// Starting hyperparameters (defaults to σ = 0.1, φ = 0.5).
    pub initial_hyper: Option<Hyperparameters>,
    /// Skip optimisation and condition on `initial_hyper`.
    pub fixed_hyper: bool,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self {
            inner: InnerSettings::default(),
            optimizer: OptimizerSettings::default(),
            n_samples: 1000,
            seed: 1,
            initial_hyper: None,
            fixed_hyper: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub hyper_converged: bool,
    pub hyper_fixed: bool,
    pub evaluations: usize,
    pub simplex_iterations: usize,
    pub simplex_diameter: Option<f64>,
    pub inner_iterations: usize,
    pub inner_converged: bool,
    pub inner_final_change: f64,
    pub projected_gradient_norm: f64,
    pub max_constraint_violation: f64,
    /// Every `|κ_t|` is within two posterior sd of zero, so `β` is weakly identified.
    pub weak_time_trend: bool,
}

impl ConvergenceReport {
    pub fn converged(&self) -> bool {
        self.hyper_converged && self.inner_converged
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub gender: String,
    pub variant: Variant,
    pub ages: Vec<u32>,
    pub years: Vec<i32>,
    pub areas: Vec<String>,
    /// Group of each age position.
    pub age_groups: Vec<usize>,
    /// Period of each year position.
    pub periods: Vec<usize>,
    pub n_groups: usize,
    pub n_periods: usize,
    pub hyper_names: Vec<String>,
    /// Unconstrained hyperparameters (log σ, logit φ).
    pub theta: Vec<f64>,
    pub theta_se: Vec<Option<f64>>,
    pub hyper: Hyperparameters,
    pub marginal_log_posterior: f64,
    pub alpha: Vec<Summary>,
    pub beta: Vec<Summary>,
    pub kappa: Vec<Summary>,
    /// Indexed `(g·P + p)·S + s`.
    pub omega: Vec<Summary>,
    /// Indexed `a·T + t`.
    pub beta_kappa: Vec<Summary>,
    /// Log rate at the posterior mode for every cell, dataset order.
    pub log_rate: Vec<f64>,
    pub n_samples: usize,
    pub seed: u64,
    pub convergence: ConvergenceReport,
}

impl FitResult {
    pub fn omega_at(&self, area: usize, group: usize, period: usize) -> &Summary {
        &self.omega[(group * self.n_periods + period) * self.areas.len() + area]
    }
}

/// Build the model and fit it.
pub fn fit_dataset(data: &MortalityDataset, graph: &SpatialGraph, spec: ModelSpec, settings: &FitSettings) -> Result<FitResult> {
    let model = Model::new(data, graph, spec)?;
    fit(&model, settings)
}

pub fn fit(model: &Model, settings: &FitSettings) -> Result<FitResult> {
    let init = settings.initial_hyper.clone().unwrap_or_else(|| model.initial_hyper());
    model.check_hyper(&init)?;
    let theta0 = model.hyper_to_internal(&init);
    let n_hyper = theta0.len();
    let (eval, theta_se, hyper_converged, evaluations, iterations, diameter) = if settings.fixed_hyper || n_hyper == 0 {
        let ev = evaluate_internal(model, &theta0, None, &settings.inner)?;
        (ev, vec![None; n_hyper], true, 1, 0, None)
    } else {
        match optimize_hyper(model, &theta0, &settings.optimizer, &settings.inner) {
            Ok(opt) => {
                let ev = super::laplace::MarginalEvaluation {
                    theta: opt.theta,
                    value: opt.value,
                    approx: opt.approx,
                };
                (ev, opt.standard_errors, true, opt.evaluations, opt.iterations, Some(opt.diameter))
            }
            Err(Error::HyperNotConverged { evaluations, best, .. }) => {
                warn!("hyperparameter optimisation stopped after {evaluations} evaluations without converging");
                let ev = evaluate_internal(model, &best, None, &settings.inner)?;
                (ev, vec![None; n_hyper], false, evaluations, 0, None)
            }
            Err(e) => return Err(e),
        }
    };
    let approx = &eval.approx;
    let hyper = model.hyper_from_internal(&eval.theta);
    info!("fit: log marginal posterior {:.10e} at {:?}", eval.value, eval.theta);

    let l = &model.layout;
    let mode = &approx.mode;
    let var = approx.reduced_variances();
    let gaussian = |r: std::ops::Range<usize>| -> Vec<Summary> { r.map(|j| Summary::gaussian(mode[j], var[j].sqrt())).collect() };
    let alpha = gaussian(l.alpha.clone());
    let beta = gaussian(l.beta.clone());
    let kappa = gaussian(l.kappa.clone());
    let s = l.n_areas;
    let mut omega = Vec::with_capacity(s * l.n_fields());
    for k in 0..l.n_fields() {
        let r = l.field_range(k);
        omega.extend(gaussian(r.start..r.start + s));
    }

    let (na, nt) = (l.n_ages, l.n_years);
    let beta_kappa = if l.beta.is_empty() || settings.n_samples == 0 {
        Vec::new()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
        let nr = approx.precision.reduced_dim();
        let mut draws = vec![Vec::with_capacity(settings.n_samples); na * nt];
        let mut eps = vec![0.0; nr];
        for _ in 0..settings.n_samples {
            for e in eps.iter_mut() {
                *e = StandardNormal.sample(&mut rng);
            }
            let x = approx.sample_reduced(model, &eps);
            for a in 0..na {
                for t in 0..nt {
                    draws[a * nt + t].push(x[l.beta.start + a] * x[l.kappa.start + t]);
                }
            }
        }
        draws.iter_mut().map(|d| Summary::empirical(d)).collect()
    };

    let field = model.to_field(mode);
    let mut log_rate = Vec::with_capacity(model.n_cells_total());
    for a in 0..na {
        for t in 0..nt {
            for sa in 0..s {
                log_rate.push(model.predictor(&field, a, t, sa)?);
            }
        }
    }
    let weak_time_trend = !kappa.is_empty() && kappa.iter().all(|k| k.mean.abs() < 2.0 * k.sd);
    if weak_time_trend {
        warn!("no time trend beyond two posterior sd: beta is weakly identified");
    }
    let convergence = ConvergenceReport {
        hyper_converged,
        hyper_fixed: settings.fixed_hyper,
        evaluations,
        simplex_iterations: iterations,
        simplex_diameter: diameter,
        inner_iterations: approx.iterations,
        inner_converged: approx.converged,
        inner_final_change: approx.final_change,
        projected_gradient_norm: approx.projected_gradient_norm,
        max_constraint_violation: model.constraints.max_violation(mode),
        weak_time_trend,
    };
    Ok(FitResult {
        gender: model.labels.gender.clone(),
        variant: model.spec.variant,
        ages: model.labels.ages.clone(),
        years: model.labels.years.clone(),
        areas: model.labels.areas.clone(),
        age_groups: model.spec.age_grouping.as_slice().to_vec(),
        periods: model.spec.period_mapping.as_slice().to_vec(),
        n_groups: l.n_groups,
        n_periods: l.n_periods,
        hyper_names: model.hyper_names(),
        theta: eval.theta.clone(),
        theta_se,
        hyper,
        marginal_log_posterior: eval.value,
        alpha,
        beta,
        kappa,
        omega,
        beta_kappa,
        log_rate,
        n_samples: settings.n_samples,
        seed: settings.seed,
        convergence,
    })
}
