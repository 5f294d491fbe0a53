//! Hyperparameter optimisation: Nelder-Mead on the unconstrained scale and a
//! finite-difference Hessian at the optimum.

use log::info;
use nalgebra::DMatrix;
use rayon::prelude::*;

use super::inner::{GaussianApprox, InnerSettings};
use super::laplace::{evaluate_internal, MarginalEvaluation};
use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSettings {
    pub max_evaluations: usize,
    /// Convergence when every vertex lies within this distance (max norm) of the best.
    pub tolerance: f64,
    pub initial_step: f64,
    pub hessian_step: f64,
    /// Indices of the unconstrained hyperparameters to optimise; the rest
    /// stay at their initial values. `None` optimises all of them.
    pub free: Option<Vec<usize>>,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            max_evaluations: 2000,
            tolerance: 1e-4,
            initial_step: 0.5,
            hessian_step: 0.02,
            free: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
    pub iterations: usize,
    pub diameter: f64,
    pub converged: bool,
}

/// Maximise with the Nelder-Mead simplex method. `eval` receives batches of
/// points (the initial simplex, shrink steps, single trial points) and
/// returns their values in order; non-finite values count as worst.
pub fn nelder_mead<F>(mut eval: F, x0: &[f64], step: f64, tolerance: f64, max_evaluations: usize) -> NelderMeadResult
where
    F: FnMut(&[Vec<f64>]) -> Vec<f64>,
{
    let n = x0.len();
    let clean = |v: f64| if v.is_nan() { f64::NEG_INFINITY } else { v };
    let (alpha, gamma, rho, sigma) = if n >= 2 {
        let nf = n as f64;
        (1.0, 1.0 + 2.0 / nf, 0.75 - 1.0 / (2.0 * nf), 1.0 - 1.0 / nf)
    } else {
        (1.0, 2.0, 0.5, 0.5)
    };
    let mut pts: Vec<Vec<f64>> = vec![x0.to_vec()];
    for i in 0..n {
        let mut p = x0.to_vec();
        p[i] += step;
        pts.push(p);
    }
    let mut vals: Vec<f64> = eval(&pts).into_iter().map(clean).collect();
    let mut evaluations = pts.len();
    let mut iterations = 0;
    let lerp = |a: &[f64], b: &[f64], t: f64| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x + t * (y - x)).collect() };
    loop {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&i, &j| vals[j].partial_cmp(&vals[i]).unwrap_or(std::cmp::Ordering::Equal).then(i.cmp(&j)));
        pts = order.iter().map(|&i| pts[i].clone()).collect();
        vals = order.iter().map(|&i| vals[i]).collect();
        let diameter = pts[1..]
            .iter()
            .flat_map(|p| p.iter().zip(&pts[0]).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        info!("simplex iteration {iterations}: best {:.10e}, diameter {diameter:.3e}, evaluations {evaluations}", vals[0]);
        if diameter < tolerance || n == 0 {
            return NelderMeadResult {
                x: pts[0].clone(),
                value: vals[0],
                evaluations,
                iterations,
                diameter,
                converged: true,
            };
        }
        if evaluations >= max_evaluations {
            return NelderMeadResult {
                x: pts[0].clone(),
                value: vals[0],
                evaluations,
                iterations,
                diameter,
                converged: false,
            };
        }
        iterations += 1;
        let mut centroid = vec![0.0; n];
        for p in &pts[..n] {
            for (c, v) in centroid.iter_mut().zip(p) {
                *c += v / n as f64;
            }
        }
        let mut single = |p: Vec<f64>, evaluations: &mut usize| -> (Vec<f64>, f64) {
            *evaluations += 1;
            let v = clean(eval(std::slice::from_ref(&p))[0]);
            (p, v)
        };
        let worst = pts[n].clone();
        let (xr, fr) = single(lerp(&centroid, &worst, -alpha), &mut evaluations);
        if fr > vals[0] {
            let (xe, fe) = single(lerp(&centroid, &xr, gamma), &mut evaluations);
            if fe > fr {
                pts[n] = xe;
                vals[n] = fe;
            } else {
                pts[n] = xr;
                vals[n] = fr;
            }
            continue;
        }
        if fr > vals[n - 1] {
            pts[n] = xr;
            vals[n] = fr;
            continue;
        }
        let (xc, fc, ok) = if fr > vals[n] {
            let (xc, fc) = single(lerp(&centroid, &xr, rho), &mut evaluations);
            let ok = fc >= fr;
            (xc, fc, ok)
        } else {
            let (xc, fc) = single(lerp(&centroid, &worst, rho), &mut evaluations);
            let ok = fc > vals[n];
            (xc, fc, ok)
        };
        if ok {
            pts[n] = xc;
            vals[n] = fc;
            continue;
        }
        let shrunk: Vec<Vec<f64>> = pts[1..].iter().map(|p| lerp(&pts[0], p, sigma)).collect();
        let sv = eval(&shrunk);
        evaluations += shrunk.len();
        for (i, (p, v)) in shrunk.into_iter().zip(sv).enumerate() {
            pts[i + 1] = p;
            vals[i + 1] = clean(v);
        }
    }
}

/// Central finite-difference Hessian. `eval` receives one batch holding
/// every required point.
pub fn fd_hessian<F>(eval: F, x: &[f64], center_value: f64, h: f64) -> DMatrix<f64>
where
    F: FnOnce(&[Vec<f64>]) -> Vec<f64>,
{
    let n = x.len();
    let shifted = |moves: &[(usize, f64)]| {
        let mut p = x.to_vec();
        for &(i, d) in moves {
            p[i] += d;
        }
        p
    };
    let mut pts = Vec::new();
    for i in 0..n {
        pts.push(shifted(&[(i, h)]));
        pts.push(shifted(&[(i, -h)]));
    }
    for i in 0..n {
        for j in i + 1..n {
            for (si, sj) in [(h, h), (h, -h), (-h, h), (-h, -h)] {
                pts.push(shifted(&[(i, si), (j, sj)]));
            }
        }
    }
    let v = eval(&pts);
    let mut hess = DMatrix::zeros(n, n);
    for i in 0..n {
        hess[(i, i)] = (v[2 * i] - 2.0 * center_value + v[2 * i + 1]) / (h * h);
    }
    let mut k = 2 * n;
    for i in 0..n {
        for j in i + 1..n {
            let val = (v[k] - v[k + 1] - v[k + 2] + v[k + 3]) / (4.0 * h * h);
            hess[(i, j)] = val;
            hess[(j, i)] = val;
            k += 4;
        }
    }
    hess
}

#[derive(Debug, Clone)]
pub struct HyperOptimum {
    /// Unconstrained hyperparameters at the optimum (all of them, fixed ones included).
    pub theta: Vec<f64>,
    pub value: f64,
    /// Hessian of the log marginal over the free coordinates.
    pub hessian: DMatrix<f64>,
    /// Standard errors on the unconstrained scale; `None` for fixed
    /// coordinates or when the Hessian is not negative definite.
    pub standard_errors: Vec<Option<f64>>,
    pub evaluations: usize,
    pub iterations: usize,
    pub diameter: f64,
    pub converged: bool,
    pub approx: GaussianApprox,
}

struct Evaluator<'a> {
    model: &'a Model,
    inner: &'a InnerSettings,
    base: Vec<f64>,
    free: Vec<usize>,
    best: Option<(f64, Vec<f64>)>,
    first_error: Option<Error>,
}

impl Evaluator<'_> {
    fn full(&self, reduced: &[f64]) -> Vec<f64> {
        let mut t = self.base.clone();
        for (&i, &v) in self.free.iter().zip(reduced) {
            t[i] = v;
        }
        t
    }

    fn batch(&mut self, pts: &[Vec<f64>]) -> Vec<f64> {
        let start = self.best.as_ref().map(|(_, m)| m.clone());
        let thetas: Vec<Vec<f64>> = pts.iter().map(|p| self.full(p)).collect();
        let (model, inner) = (self.model, self.inner);
        let results: Vec<Result<MarginalEvaluation>> = thetas
            .par_iter()
            .map(|t| evaluate_internal(model, t, start.as_deref(), inner))
            .collect();
        results
            .into_iter()
            .map(|r| match r {
                Ok(ev) => {
                    if ev.value.is_finite() && self.best.as_ref().is_none_or(|(b, _)| ev.value > *b) {
                        self.best = Some((ev.value, ev.approx.mode.clone()));
                    }
                    ev.value
                }
                Err(e) => {
                    log::warn!("marginal evaluation failed: {e}");
                    if self.first_error.is_none() {
                        self.first_error = Some(e);
                    }
                    f64::NEG_INFINITY
                }
            })
            .collect()
    }
}

/// Maximise the Laplace marginal posterior over the unconstrained
/// hyperparameters starting from `init`.
pub fn optimize_hyper(model: &Model, init: &[f64], settings: &OptimizerSettings, inner: &InnerSettings) -> Result<HyperOptimum> {
    if init.len() != model.n_hyper() || init.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "initial hyperparameters must be {} finite values",
            model.n_hyper()
        )));
    }
    let free = settings.free.clone().unwrap_or_else(|| (0..init.len()).collect());
    if free.iter().any(|&i| i >= init.len()) {
        return Err(Error::InvalidParameter("free hyperparameter index out of range".into()));
    }
    let mut ev = Evaluator {
        model,
        inner,
        base: init.to_vec(),
        free: free.clone(),
        best: None,
        first_error: None,
    };
    let x0: Vec<f64> = free.iter().map(|&i| init[i]).collect();
    let nm = nelder_mead(|pts| ev.batch(pts), &x0, settings.initial_step, settings.tolerance, settings.max_evaluations);
    if !nm.value.is_finite() {
        return Err(ev.first_error.unwrap_or_else(|| Error::Numerical("marginal posterior is not finite at any simplex vertex".into())));
    }
    let theta = ev.full(&nm.x);
    if !nm.converged {
        return Err(Error::HyperNotConverged {
            evaluations: nm.evaluations,
            best: theta,
            best_value: nm.value,
        });
    }
    let start = ev.best.as_ref().map(|(_, m)| m.clone());
    let center = evaluate_internal(model, &theta, start.as_deref(), inner)?;
    let ev_ref = &mut ev;
    let hessian = fd_hessian(|pts| ev_ref.batch(pts), &nm.x, center.value, settings.hessian_step);
    let standard_errors = standard_errors(&hessian, &free, init.len());
    Ok(HyperOptimum {
        theta,
        value: center.value,
        hessian,
        standard_errors,
        evaluations: nm.evaluations,
        iterations: nm.iterations,
        diameter: nm.diameter,
        converged: true,
        approx: center.approx,
    })
}

fn standard_errors(hessian: &DMatrix<f64>, free: &[usize], n: usize) -> Vec<Option<f64>> {
    let mut out = vec![None; n];
    if free.is_empty() {
        return out;
    }
    if let Some(ch) = (-hessian).cholesky() {
        let cov = ch.inverse();
        for (k, &i) in free.iter().enumerate() {
            out[i] = Some(cov[(k, k)].sqrt());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_maximiser() {
        let target = [0.3, -1.2, 2.0];
        let f = |p: &[f64]| -> f64 {
            -(p[0] - target[0]).powi(2) - 2.0 * (p[1] - target[1]).powi(2) - 0.5 * (p[2] - target[2]).powi(2)
                + 0.3 * (p[0] - target[0]) * (p[1] - target[1])
        };
        let r = nelder_mead(|pts| pts.iter().map(|p| f(p)).collect(), &[0.0, 0.0, 0.0], 0.5, 1e-9, 10_000);
        assert!(r.converged);
        for i in 0..3 {
            assert!((r.x[i] - target[i]).abs() < 1e-6, "{:?}", r.x);
        }
    }

    #[test]
    fn one_dimensional() {
        let r = nelder_mead(|pts| pts.iter().map(|p| -(p[0] - 4.0).powi(2)).collect(), &[0.0], 1.0, 1e-9, 1000);
        assert!((r.x[0] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn budget_exhaustion_is_reported() {
        let r = nelder_mead(|pts| pts.iter().map(|p| -(p[0] - 4.0).powi(2) - p[1].powi(2)).collect(), &[0.0, 0.0], 1.0, 1e-12, 20);
        assert!(!r.converged);
        assert!(r.evaluations >= 20);
    }

    #[test]
    fn hessian_of_quadratic() {
        let f = |p: &[f64]| -2.0 * p[0] * p[0] + 0.5 * p[0] * p[1] - 3.0 * p[1] * p[1];
        let h = fd_hessian(|pts| pts.iter().map(|p| f(p)).collect(), &[0.4, -0.7], f(&[0.4, -0.7]), 0.02);
        assert!((h[(0, 0)] + 4.0).abs() < 1e-8);
        assert!((h[(0, 1)] - 0.5).abs() < 1e-8);
        assert!((h[(1, 1)] + 6.0).abs() < 1e-8);
    }
}
