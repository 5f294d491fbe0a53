//! Constrained Gaussian approximation of the latent field at fixed
//! hyperparameters.
//!
//! The predictor is linearised in `(β, κ)` around the current point,
//! `β_xκ_t ≈ κ₀β_x + β₀κ_t - β₀κ₀`, which gives the Gauss-Newton precision
//! `H = JᵀWJ + Q` with `W = diag(E·exp(η))`. Each iteration takes the
//! constrained Newton step for the exact log density under this precision
//! and relinearises at the new point.

use std::collections::HashMap;

use log::debug;
use nalgebra::{DMatrix, DVector};

use super::solver::{ArrowBlock, ArrowFactor, ArrowMatrix};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{Hyperparameters, Model, PriorParams};

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerSettings {
    /// Stop when the largest absolute change of the latent vector falls below this.
    pub tolerance: f64,
    /// Also require the Euclidean norm of the projected gradient to fall below this.
    pub gradient_tolerance: f64,
    pub max_iterations: usize,
    pub max_halvings: usize,
}

impl Default for InnerSettings {
    fn default() -> Self {
        Self {
            tolerance: 1e-6,
            gradient_tolerance: 1e-6,
            max_iterations: 50,
            max_halvings: 20,
        }
    }
}

/// Gauss-Newton precision at a linearisation point, factored.
///
/// `z` is eliminated first (it is diagonal given the rest); the remaining
/// system has the block-arrow form handled by [`ArrowMatrix`], with border
/// `(α, β, κ)` and one block per spatial field.
#[derive(Debug, Clone)]
pub struct LatentPrecision {
    /// `β, κ` at the linearisation point.
    beta: Vec<f64>,
    kappa: Vec<f64>,
    /// Likelihood weights `w` for every active cell.
    weights: Vec<f64>,
    /// `w + τ_z` (empty without `z`).
    z_diag: Vec<f64>,
    arrow: ArrowFactor,
    reduced_dim: usize,
    log_det: f64,
}

impl LatentPrecision {
    pub fn new(model: &Model, x: &[f64], pp: &PriorParams) -> Result<Self> {
        let l = &model.layout;
        let c = &model.cells;
        let eta = model.predictors(x);
        let weights: Vec<f64> = eta.iter().enumerate().map(|(i, &e)| model.cell_terms(i, e).2).collect();
        let has_z = !l.z.is_empty();
        let z_diag: Vec<f64> = if has_z { weights.iter().map(|w| w + pp.tau_z).collect() } else { Vec::new() };
        let reduced: Vec<f64> = if has_z {
            weights.iter().zip(&z_diag).map(|(w, d)| w * pp.tau_z / d).collect()
        } else {
            weights.clone()
        };
        let beta = x[l.beta.clone()].to_vec();
        let kappa = x[l.kappa.clone()].to_vec();
        let lc = !l.beta.is_empty();

        let m = l.border_dim();
        let mut border = DMatrix::zeros(m, m);
        let v = model.priors.wide.variance;
        for j in l.alpha.clone().chain(l.beta.clone()) {
            border[(j, j)] += 1.0 / v;
        }
        if let Some(rw2) = &model.rw2 {
            let scale = pp.tau_kappa * rw2.scaling_factor;
            let k0 = l.kappa.start;
            for (val, (i, j)) in rw2.structure.iter() {
                border[(k0 + i, k0 + j)] += scale * val;
            }
        }
        // border contributions aggregated over areas
        let (na, nt) = (l.n_ages, l.n_years);
        let mut w_at = vec![0.0; na * nt];
        for i in 0..c.len() {
            w_at[c.age[i] * nt + c.year[i]] += reduced[i];
        }
        for a in 0..na {
            for t in 0..nt {
                let w = w_at[a * nt + t];
                if w == 0.0 {
                    continue;
                }
                let mut idx = [(0usize, 0.0f64); 3];
                let mut n = 0;
                if !l.alpha.is_empty() {
                    idx[n] = (l.alpha.start + a, 1.0);
                    n += 1;
                }
                if lc {
                    idx[n] = (l.beta.start + a, kappa[t]);
                    idx[n + 1] = (l.kappa.start + t, beta[a]);
                    n += 2;
                }
                for p in 0..n {
                    for q in 0..n {
                        border[(idx[p].0, idx[q].0)] += w * idx[p].1 * idx[q].1;
                    }
                }
            }
        }

        let s = l.n_areas;
        let mut blocks = Vec::with_capacity(l.n_fields());
        let mut block_pos = Vec::with_capacity(l.n_fields());
        for k in 0..l.n_fields() {
            let g = model.field_group(k);
            let p = k % l.n_periods;
            let co = pp.bym[g];
            let mut diag = DMatrix::zeros(2 * s, 2 * s);
            for i in 0..s {
                diag[(i, i)] = co.a;
                diag[(i, s + i)] = -co.b;
                diag[(s + i, i)] = -co.b;
                diag[(s + i, s + i)] = co.c;
            }
            for (val, (i, j)) in model.spatial.structure.matrix.iter() {
                diag[(s + i, s + j)] += val;
            }
            let mut cols = Vec::new();
            if !l.alpha.is_empty() {
                cols.extend(model.spec.age_grouping.members(g).map(|a| l.alpha.start + a));
            }
            if lc {
                cols.extend(model.spec.age_grouping.members(g).map(|a| l.beta.start + a));
                cols.extend((0..nt).filter(|&t| model.spec.period_mapping.period_of(t) == p).map(|t| l.kappa.start + t));
            }
            let mut pos = vec![usize::MAX; m];
            for (j, &col) in cols.iter().enumerate() {
                pos[col] = j;
            }
            block_pos.push(pos);
            blocks.push(ArrowBlock {
                diag,
                coupling: DMatrix::zeros(2 * s, cols.len()),
                cols,
            });
        }
        if !l.spatial.is_empty() {
            for i in 0..c.len() {
                let w = reduced[i];
                let (a, t) = (c.age[i], c.year[i]);
                let off = c.omega[i] - l.spatial.start;
                let k = off / (2 * s);
                let row = off % (2 * s);
                let b = &mut blocks[k];
                let pos = &block_pos[k];
                b.diag[(row, row)] += w;
                if !l.alpha.is_empty() {
                    b.coupling[(row, pos[l.alpha.start + a])] += w;
                }
                if lc {
                    b.coupling[(row, pos[l.beta.start + a])] += w * kappa[t];
                    b.coupling[(row, pos[l.kappa.start + t])] += w * beta[a];
                }
            }
        }
        // AᵀA vanishes on the constraint subspace, so the constrained mode,
        // covariance and log density are unchanged; without it H is singular
        // whenever β is constant within every age group.
        let mut border = border;
        for row in &model.constraints.rows {
            let first = row.first().map_or(0, |r| r.0);
            if row.iter().all(|&(j, _)| j < m) {
                for &(p, vp) in row {
                    for &(q, vq) in row {
                        border[(p, q)] += vp * vq;
                    }
                }
            } else if first >= l.spatial.start && first < l.spatial.end {
                let k = (first - l.spatial.start) / (2 * s);
                let r0 = l.field_range(k).start;
                if row.iter().any(|&(j, _)| !l.field_range(k).contains(&j)) {
                    return Err(Error::InvalidParameter("constraint row spans several latent blocks".into()));
                }
                for &(p, vp) in row {
                    for &(q, vq) in row {
                        blocks[k].diag[(p - r0, q - r0)] += vp * vq;
                    }
                }
            } else {
                return Err(Error::InvalidParameter("constraint row spans several latent blocks".into()));
            }
        }
        let arrow = ArrowMatrix { border, blocks }.factor()?;
        let log_det = arrow.log_det() + z_diag.iter().map(|d| d.ln()).sum::<f64>();
        Ok(Self {
            beta,
            kappa,
            weights,
            z_diag,
            arrow,
            reduced_dim: l.spatial.end,
            log_det,
        })
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn reduced_dim(&self) -> usize {
        self.reduced_dim
    }

    /// `j_c · v` over the non-`z` coordinates of cell `i`.
    fn row_dot(&self, model: &Model, i: usize, v: &[f64]) -> f64 {
        let l = &model.layout;
        let c = &model.cells;
        let (a, t) = (c.age[i], c.year[i]);
        let mut s = 0.0;
        if !l.alpha.is_empty() {
            s += v[l.alpha.start + a];
        }
        if !l.beta.is_empty() {
            s += self.kappa[t] * v[l.beta.start + a] + self.beta[a] * v[l.kappa.start + t];
        }
        if !l.spatial.is_empty() {
            s += v[c.omega[i]];
        }
        s
    }

    fn row_axpy(&self, model: &Model, i: usize, f: f64, v: &mut [f64]) {
        let l = &model.layout;
        let c = &model.cells;
        let (a, t) = (c.age[i], c.year[i]);
        if !l.alpha.is_empty() {
            v[l.alpha.start + a] += f;
        }
        if !l.beta.is_empty() {
            v[l.beta.start + a] += f * self.kappa[t];
            v[l.kappa.start + t] += f * self.beta[a];
        }
        if !l.spatial.is_empty() {
            v[c.omega[i]] += f;
        }
    }

    /// Solve `H x = rhs` over the full latent vector.
    pub fn solve(&self, model: &Model, rhs: &[f64]) -> Vec<f64> {
        let nr = self.reduced_dim;
        let mut r = rhs[..nr].to_vec();
        let z0 = model.layout.z.start;
        for i in 0..self.z_diag.len() {
            let f = -self.weights[i] * rhs[z0 + i] / self.z_diag[i];
            self.row_axpy(model, i, f, &mut r);
        }
        let mut x = self.arrow.solve(&r);
        x.resize(rhs.len(), 0.0);
        for i in 0..self.z_diag.len() {
            let jx = self.row_dot(model, i, &x);
            x[z0 + i] = (rhs[z0 + i] - self.weights[i] * jx) / self.z_diag[i];
        }
        x
    }

    /// Draw the non-`z` coordinates from `N(0, H⁻¹)`.
    pub fn sample_reduced(&self, eps: &[f64]) -> Vec<f64> {
        self.arrow.solve_lt(eps)
    }

    /// Diagonal of `H⁻¹` over the non-`z` coordinates.
    pub fn reduced_inverse_diagonal(&self) -> Vec<f64> {
        self.arrow.inverse_diagonal()
    }

    /// Border `(α, β, κ)` block of `H⁻¹`.
    pub fn border_covariance(&self) -> DMatrix<f64> {
        self.arrow.border_covariance()
    }
}

/// `H⁻¹Aᵀ` and the Cholesky factor of `AH⁻¹Aᵀ` for constraint corrections.
#[derive(Debug, Clone)]
pub struct ConstraintSolve {
    /// One column of `H⁻¹Aᵀ` per constraint row.
    pub v: Vec<Vec<f64>>,
    l: DMatrix<f64>,
    log_det: f64,
}

impl ConstraintSolve {
    pub fn new(model: &Model, prec: &LatentPrecision) -> Result<Self> {
        let rows = &model.constraints.rows;
        let n = model.dim();
        let v: Vec<Vec<f64>> = rows
            .iter()
            .map(|row| {
                let mut a = vec![0.0; n];
                for &(j, val) in row {
                    a[j] = val;
                }
                prec.solve(model, &a)
            })
            .collect();
        let k = rows.len();
        let av = DMatrix::from_fn(k, k, |r, c| rows[r].iter().map(|&(j, val)| val * v[c][j]).sum());
        let (l, log_det) = if k > 0 {
            let ch = linalg::cholesky(av, "A H⁻¹ Aᵀ")?;
            let ld = linalg::chol_log_det(&ch);
            (ch.l(), ld)
        } else {
            (DMatrix::zeros(0, 0), 0.0)
        };
        Ok(Self { v, l, log_det })
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    fn solve_small(&self, r: &[f64]) -> DVector<f64> {
        let y = self
            .l
            .solve_lower_triangular(&DVector::from_column_slice(r))
            .expect("triangular solve");
        self.l.tr_solve_lower_triangular(&y).expect("triangular solve")
    }

    /// `x - H⁻¹Aᵀ(AH⁻¹Aᵀ)⁻¹ r` for a given residual `r`.
    pub fn correct(&self, x: &mut [f64], r: &[f64]) {
        if self.v.is_empty() {
            return;
        }
        let lam = self.solve_small(r);
        for (col, &f) in self.v.iter().zip(lam.iter()) {
            for (xi, vi) in x.iter_mut().zip(col) {
                *xi -= f * vi;
            }
        }
    }

    /// Diagonal of `H⁻¹Aᵀ(AH⁻¹Aᵀ)⁻¹AH⁻¹` over the first `n` coordinates.
    pub fn correction_diagonal(&self, n: usize) -> Vec<f64> {
        let k = self.v.len();
        let mut out = vec![0.0; n];
        if k == 0 {
            return out;
        }
        let linv = self.l.solve_lower_triangular(&DMatrix::identity(k, k)).expect("triangular solve");
        // (AV)⁻¹ = L⁻ᵀL⁻¹, so the diagonal is Σ_r (Σ_c L⁻¹[r,c] v_c[i])²
        for r in 0..k {
            for (i, o) in out.iter_mut().enumerate() {
                let s: f64 = (0..=r).map(|c| linv[(r, c)] * self.v[c][i]).sum();
                *o += s * s;
            }
        }
        out
    }
}

/// Cholesky factor of `AAᵀ` built from the sparse constraint rows.
#[derive(Debug, Clone)]
pub struct ConstraintGram {
    l: Option<DMatrix<f64>>,
}

impl ConstraintGram {
    pub fn new(model: &Model) -> Result<Self> {
        let rows = &model.constraints.rows;
        let k = rows.len();
        if k == 0 {
            return Ok(Self { l: None });
        }
        let maps: Vec<HashMap<usize, f64>> = rows.iter().map(|r| r.iter().copied().collect()).collect();
        let mut g = DMatrix::zeros(k, k);
        for r in 0..k {
            for c in 0..=r {
                let s: f64 = rows[r].iter().filter_map(|(j, v)| maps[c].get(j).map(|w| v * w)).sum();
                g[(r, c)] = s;
                g[(c, r)] = s;
            }
        }
        Ok(Self {
            l: Some(linalg::cholesky(g, "A Aᵀ")?.l()),
        })
    }

    /// `log det(AAᵀ)` (zero without constraints).
    pub fn log_det(&self) -> f64 {
        self.l.as_ref().map_or(0.0, |l| 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>())
    }

    /// `v - Aᵀ(AAᵀ)⁻¹ r`.
    fn subtract_row_space(&self, model: &Model, v: &mut [f64], r: Vec<f64>) {
        let Some(l) = &self.l else { return };
        let mut lam = DVector::from_vec(r);
        l.solve_lower_triangular_mut(&mut lam);
        l.tr_solve_lower_triangular_mut(&mut lam);
        for (row, f) in model.constraints.rows.iter().zip(lam.iter()) {
            for &(j, a) in row {
                v[j] -= a * f;
            }
        }
    }

    /// Euclidean projection onto `{x : Ax = e}`.
    pub fn project(&self, model: &Model, x: &mut [f64]) {
        let r = model.constraints.residual(x);
        self.subtract_row_space(model, x, r);
    }

    /// Euclidean norm of `g` projected onto the null space of `A`.
    pub fn projected_norm(&self, model: &Model, g: &[f64]) -> f64 {
        let mut pg = g.to_vec();
        let r = model.constraints.rows.iter().map(|row| row.iter().map(|&(j, a)| a * g[j]).sum()).collect();
        self.subtract_row_space(model, &mut pg, r);
        pg.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Euclidean projection onto `{x : Ax = e}`.
pub fn project_onto_constraints(model: &Model, x: &mut [f64]) -> Result<()> {
    ConstraintGram::new(model)?.project(model, x);
    Ok(())
}

/// `log det(AAᵀ)` (zero without constraints).
pub fn constraint_gram_log_det(model: &Model) -> Result<f64> {
    Ok(ConstraintGram::new(model)?.log_det())
}

/// Euclidean norm of the gradient projected onto the constraint subspace.
pub fn projected_gradient_norm(model: &Model, g: &[f64]) -> Result<f64> {
    Ok(ConstraintGram::new(model)?.projected_norm(model, g))
}

/// Starting latent vector: `α` from age-aggregated log rates (0.5 added to
/// zero death totals), `β = 1/|ages|`, everything else zero.
pub fn initial_latent(model: &Model) -> Vec<f64> {
    let l = &model.layout;
    let c = &model.cells;
    let mut x = vec![0.0; l.dim()];
    if !l.alpha.is_empty() {
        let mut d = vec![0.0; l.n_ages];
        let mut e = vec![0.0; l.n_ages];
        for i in 0..c.len() {
            d[c.age[i]] += c.deaths[i];
            e[c.age[i]] += c.exposure[i];
        }
        for a in 0..l.n_ages {
            let deaths = if d[a] == 0.0 { 0.5 } else { d[a] };
            x[l.alpha.start + a] = if e[a] > 0.0 { (deaths / e[a]).ln() } else { 0.0 };
        }
    }
    let nb = l.beta.len() as f64;
    for j in l.beta.clone() {
        x[j] = 1.0 / nb;
    }
    x
}

/// Constrained Gaussian approximation at the posterior mode.
#[derive(Debug, Clone)]
pub struct GaussianApprox {
    pub mode: Vec<f64>,
    pub precision: LatentPrecision,
    pub constraint: ConstraintSolve,
    /// Log density of the approximation at its own mode, on the constraint subspace.
    pub log_density_at_mode: f64,
    pub log_likelihood: f64,
    pub log_prior: f64,
    pub iterations: usize,
    pub converged: bool,
    pub final_change: f64,
    pub projected_gradient_norm: f64,
}

impl GaussianApprox {
    /// Marginal variances over the non-`z` coordinates, constraint-corrected.
    pub fn reduced_variances(&self) -> Vec<f64> {
        let n = self.precision.reduced_dim();
        let d = self.precision.reduced_inverse_diagonal();
        let corr = self.constraint.correction_diagonal(n);
        d.iter().zip(&corr).map(|(a, b)| (a - b).max(0.0)).collect()
    }

    /// Draw of the non-`z` coordinates from the constrained approximation.
    pub fn sample_reduced(&self, model: &Model, eps: &[f64]) -> Vec<f64> {
        let n = self.precision.reduced_dim();
        let mut dx = self.precision.sample_reduced(eps);
        if !self.constraint.v.is_empty() {
            // constraint rows have no z columns
            let r: Vec<f64> = model
                .constraints
                .rows
                .iter()
                .map(|row| row.iter().map(|&(j, v)| v * dx[j]).sum())
                .collect();
            let lam = self.constraint.solve_small(&r);
            for (col, &f) in self.constraint.v.iter().zip(lam.iter()) {
                for i in 0..n {
                    dx[i] -= f * col[i];
                }
            }
        }
        dx.iter().zip(&self.mode).map(|(d, m)| d + m).collect()
    }
}

fn objective(model: &Model, x: &[f64], pp: &PriorParams) -> (f64, f64) {
    (model.log_likelihood(x), model.log_prior_latent(x, pp))
}

/// Constrained mode and Gaussian approximation at fixed hyperparameters.
pub fn inner_fit(model: &Model, hyper: &Hyperparameters, start: Option<&[f64]>, settings: &InnerSettings) -> Result<GaussianApprox> {
    let pp = model.prior_params(hyper)?;
    let mut x = match start {
        Some(s) => {
            if s.len() != model.dim() {
                return Err(Error::InvalidParameter("start vector has the wrong length".into()));
            }
            s.to_vec()
        }
        None => initial_latent(model),
    };
    let gram = ConstraintGram::new(model)?;
    gram.project(model, &mut x);
    let (mut ll, mut lp) = objective(model, &x, &pp);
    let mut converged = false;
    let mut change = f64::INFINITY;
    let mut pg_norm = f64::INFINITY;
    let mut iterations = 0;
    let mut prec = LatentPrecision::new(model, &x, &pp)?;
    for it in 0..settings.max_iterations {
        iterations = it + 1;
        let g = model.gradient(&x, &pp);
        pg_norm = gram.projected_norm(model, &g);
        let cons = ConstraintSolve::new(model, &prec)?;
        let mut delta = prec.solve(model, &g);
        let trial: Vec<f64> = x.iter().zip(&delta).map(|(a, b)| a + b).collect();
        cons.correct(&mut delta, &model.constraints.residual(&trial));

        let f0 = ll + lp;
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..=settings.max_halvings {
            let xn: Vec<f64> = x.iter().zip(&delta).map(|(a, d)| a + step * d).collect();
            let (l1, p1) = objective(model, &xn, &pp);
            let f1 = l1 + p1;
            if f1.is_finite() && f1 >= f0 - 1e-12 * (1.0 + f0.abs()) {
                accepted = Some((xn, l1, p1));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, l1, p1)) = accepted else {
            debug!("inner iteration {iterations}: no ascent after {} halvings", settings.max_halvings);
            break;
        };
        change = delta.iter().fold(0.0f64, |m, d| m.max((step * d).abs()));
        debug!("inner iteration {iterations}: objective {:.10e}, step {step}, max change {change:.3e}, projected gradient {pg_norm:.3e}", l1 + p1);
        x = xn;
        ll = l1;
        lp = p1;
        prec = LatentPrecision::new(model, &x, &pp)?;
        if change < settings.tolerance {
            let g = model.gradient(&x, &pp);
            let previous = pg_norm;
            pg_norm = gram.projected_norm(model, &g);
            // the gradient stops shrinking once it reaches rounding level
            if pg_norm < settings.gradient_tolerance || pg_norm > 0.5 * previous || change < 1e-13 {
                converged = true;
                break;
            }
        }
    }
    let constraint = ConstraintSolve::new(model, &prec)?;
    let n = model.dim() as f64;
    let k = model.constraints.n_rows() as f64;
    let log_density_at_mode =
        -0.5 * (n - k) * LN_2PI + 0.5 * (prec.log_det() + constraint.log_det() - gram.log_det());
    Ok(GaussianApprox {
        mode: x,
        precision: prec,
        constraint,
        log_density_at_mode,
        log_likelihood: ll,
        log_prior: lp,
        iterations,
        converged,
        final_change: change,
        projected_gradient_norm: pg_norm,
    })
}
