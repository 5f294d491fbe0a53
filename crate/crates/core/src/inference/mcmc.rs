//! Metropolis-within-Gibbs reference sampler.
//!
//! `α` and `z` are updated one site at a time with Gaussian random-walk
//! proposals. `β`, `κ` and each `(ω, u)` field are updated as blocks with
//! Gaussian proposals shaped by the block's conditional precision at the
//! starting point and projected onto the block's constraints, so every
//! proposal stays on the constraint subspace. Hyperparameters, when free,
//! are updated coordinate-wise by random walks on the unconstrained scale.
//! Proposal scales adapt during burn-in only.

use std::io::Write;
use std::ops::Range;
use std::path::Path;

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::inner::{inner_fit, InnerSettings};
use super::laplace::{LOGIT_PHI_RANGE, LOG_SIGMA_RANGE};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{Hyperparameters, Model, PriorParams};
use crate::priors::quad_form;

const LARGE_LATENT_DIM: usize = 100_000;
const ADAPT_BATCH: usize = 50;
const LOW_ACCEPTANCE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McmcSettings {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    /// Starting hyperparameters (defaults to σ = 0.1, φ = 0.5).
    pub hyper: Option<Hyperparameters>,
    /// Keep the hyperparameters at their starting value.
    pub fixed_hyper: bool,
    /// Drop the likelihood and sample the prior; the linear direction of `κ`
    /// is then constrained as well, since the prior is improper along it.
    pub prior_only: bool,
    /// Record the `z` coordinates in the draws.
    pub keep_z: bool,
}

impl Default for McmcSettings {
    fn default() -> Self {
        Self {
            iterations: 20_000,
            burn_in: 5_000,
            thin: 1,
            seed: 1,
            hyper: None,
            fixed_hyper: false,
            prior_only: false,
            keep_z: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockAcceptance {
    pub block: String,
    pub proposals: u64,
    pub accepted: u64,
    pub rate: f64,
    pub scale: f64,
}

/// Retained draws, one row per kept iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcChain {
    pub columns: Vec<String>,
    pub draws: Vec<Vec<f64>>,
    pub seed: u64,
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// Post-burn-in acceptance per block.
    pub acceptance: Vec<BlockAcceptance>,
    pub low_acceptance: Vec<String>,
}

impl McmcChain {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn values(&self, col: usize) -> Vec<f64> {
        self.draws.iter().map(|r| r[col]).collect()
    }

    pub fn mean(&self, col: usize) -> f64 {
        self.draws.iter().map(|r| r[col]).sum::<f64>() / self.draws.len() as f64
    }

    /// Monte Carlo standard error of the mean by non-overlapping batch means
    /// with `⌊√n⌋` batches.
    pub fn mc_standard_error(&self, col: usize) -> f64 {
        let v = self.values(col);
        let n = v.len();
        let nb = (n as f64).sqrt().floor() as usize;
        if nb < 2 {
            return f64::NAN;
        }
        let size = n / nb;
        let means: Vec<f64> = (0..nb).map(|b| v[b * size..(b + 1) * size].iter().sum::<f64>() / size as f64).collect();
        let m = means.iter().sum::<f64>() / nb as f64;
        let var = means.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (nb - 1) as f64;
        (var / nb as f64).sqrt()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "iteration,{}", self.columns.join(",")).map_err(io)?;
        for (i, row) in self.draws.iter().enumerate() {
            let it = self.burn_in + (i + 1) * self.thin;
            write!(w, "{it}").map_err(io)?;
            for v in row {
                write!(w, ",{v}").map_err(io)?;
            }
            writeln!(w).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Gaussian block proposal `δ = s·M·ε` on the null space of the block's constraints.
struct BlockProposal {
    name: String,
    range: Range<usize>,
    m: DMatrix<f64>,
    scale: f64,
}

struct Counter {
    proposals: u64,
    accepted: u64,
    batch_proposals: u64,
    batch_accepted: u64,
}

impl Counter {
    fn new() -> Self {
        Self {
            proposals: 0,
            accepted: 0,
            batch_proposals: 0,
            batch_accepted: 0,
        }
    }

    fn record(&mut self, accepted: bool, counting: bool) {
        self.batch_proposals += 1;
        self.batch_accepted += accepted as u64;
        if counting {
            self.proposals += 1;
            self.accepted += accepted as u64;
        }
    }

    fn take_batch_rate(&mut self) -> f64 {
        let r = self.batch_accepted as f64 / self.batch_proposals.max(1) as f64;
        self.batch_proposals = 0;
        self.batch_accepted = 0;
        r
    }

    fn rate(&self) -> f64 {
        self.accepted as f64 / self.proposals.max(1) as f64
    }
}

fn adapt(log_scale: &mut f64, rate: f64, target: f64, batch: usize) {
    let step = (1.0 / (batch as f64).sqrt()).min(0.5);
    *log_scale += step * (rate - target);
}

/// `M = (I - H⁻¹Aᵀ(AH⁻¹Aᵀ)⁻¹A)·L⁻ᵀ` with `H + AᵀA = LLᵀ`.
fn proposal_matrix(h: DMatrix<f64>, a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let d = h.nrows();
    let hp = if a.nrows() > 0 { h + a.transpose() * a } else { h };
    let ch = linalg::cholesky(hp, what)?;
    let l = ch.l();
    let linv_t = l
        .solve_lower_triangular(&DMatrix::identity(d, d))
        .ok_or_else(|| Error::Numerical(format!("singular factor for {what}")))?
        .transpose();
    if a.nrows() == 0 {
        return Ok(linv_t);
    }
    let hinv_at = ch.solve(&a.transpose());
    let g = linalg::cholesky(a * &hinv_at, what)?;
    let proj = DMatrix::identity(d, d) - &hinv_at * g.solve(a);
    Ok(proj * linv_t)
}

/// Constraint rows supported inside `range`, restated on block-local columns.
fn block_constraints(model: &Model, range: &Range<usize>) -> Vec<Vec<(usize, f64)>> {
    model
        .constraints
        .rows
        .iter()
        .filter(|row| row.iter().all(|(j, _)| range.contains(j)))
        .map(|row| row.iter().map(|&(j, v)| (j - range.start, v)).collect())
        .collect()
}

fn dense_rows(rows: &[Vec<(usize, f64)>], d: usize) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(rows.len(), d);
    for (r, row) in rows.iter().enumerate() {
        for &(j, v) in row {
            a[(r, j)] = v;
        }
    }
    a
}

struct Sampler<'a> {
    model: &'a Model,
    settings: &'a McmcSettings,
    x: Vec<f64>,
    eta: Vec<f64>,
    theta: Vec<f64>,
    pp: PriorParams,
    cells_by_age: Vec<Vec<usize>>,
    cells_by_field: Vec<Vec<usize>>,
}

impl Sampler<'_> {
    fn cell_ll(&self, i: usize, eta: f64) -> f64 {
        if self.settings.prior_only {
            0.0
        } else {
            self.model.cell_terms(i, eta).0
        }
    }

    /// Log prior of one block given the rest, up to θ-dependent constants.
    fn block_prior(&self, name: &str, range: &Range<usize>, v: &[f64]) -> f64 {
        let m = self.model;
        match name {
            "beta" => -0.5 * v.iter().map(|b| b * b).sum::<f64>() / m.priors.wide.variance,
            "kappa" => {
                let rw2 = m.rw2.as_ref().expect("kappa block present");
                -0.5 * self.pp.tau_kappa * rw2.scaling_factor * quad_form(&rw2.structure, v)
            }
            _ => {
                let l = &m.layout;
                let s = l.n_areas;
                let k = (range.start - l.spatial.start) / (2 * s);
                let co = self.pp.bym[m.field_group(k)];
                let (om, u) = v.split_at(s);
                let mut q = 0.0;
                for i in 0..s {
                    q += co.a * om[i] * om[i] - 2.0 * co.b * om[i] * u[i] + co.c * u[i] * u[i];
                }
                -0.5 * (q + quad_form(&m.spatial.structure.matrix, u))
            }
        }
    }

    /// Change in `η` at cell `i` when the block moves by `delta`.
    fn block_delta_eta(&self, name: &str, range: &Range<usize>, delta: &[f64], i: usize) -> f64 {
        let l = &self.model.layout;
        let c = &self.model.cells;
        match name {
            "beta" => delta[c.age[i]] * self.x[l.kappa.start + c.year[i]],
            "kappa" => self.x[l.beta.start + c.age[i]] * delta[c.year[i]],
            _ => delta[c.omega[i] - range.start],
        }
    }

    fn block_cells(&self, name: &str, range: &Range<usize>) -> Vec<usize> {
        match name {
            "beta" | "kappa" => (0..self.model.cells.len()).collect(),
            _ => {
                let l = &self.model.layout;
                self.cells_by_field[(range.start - l.spatial.start) / (2 * l.n_areas)].clone()
            }
        }
    }

    fn update_block<R: Rng>(&mut self, b: &BlockProposal, cells: &[usize], rng: &mut R) -> bool {
        let d = b.range.len();
        let eps = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let delta: Vec<f64> = (&b.m * eps).iter().map(|v| v * b.scale).collect();
        let current = &self.x[b.range.clone()];
        let proposed: Vec<f64> = current.iter().zip(&delta).map(|(a, d)| a + d).collect();
        let mut diff = self.block_prior(&b.name, &b.range, &proposed) - self.block_prior(&b.name, &b.range, current);
        let mut new_eta = Vec::with_capacity(cells.len());
        for &i in cells {
            let e = self.eta[i] + self.block_delta_eta(&b.name, &b.range, &delta, i);
            diff += self.cell_ll(i, e) - self.cell_ll(i, self.eta[i]);
            new_eta.push(e);
        }
        let u: f64 = rng.random();
        if diff.is_finite() && u.ln() < diff {
            self.x[b.range.clone()].copy_from_slice(&proposed);
            for (&i, e) in cells.iter().zip(new_eta) {
                self.eta[i] = e;
            }
            true
        } else {
            false
        }
    }

    fn hyper_target(&self, theta: &[f64]) -> Option<(f64, PriorParams)> {
        let h = self.model.hyper_from_internal(theta);
        let pp = self.model.prior_params(&h).ok()?;
        let v = self.model.log_prior_latent(&self.x, &pp) + self.model.log_hyperprior(theta);
        v.is_finite().then_some((v, pp))
    }
}

/// Run the sampler. The chain starts at the constrained mode for the starting
/// hyperparameters, which also fixes the block proposal shapes.
pub fn mcmc_fit(model: &Model, settings: &McmcSettings) -> Result<McmcChain> {
    if settings.thin == 0 {
        return Err(Error::InvalidParameter("thin must be at least 1".into()));
    }
    if settings.burn_in >= settings.iterations {
        return Err(Error::InvalidParameter(format!(
            "burn-in ({}) must be smaller than the number of iterations ({})",
            settings.burn_in, settings.iterations
        )));
    }
    if model.dim() > LARGE_LATENT_DIM {
        warn!("MCMC on {} latent coordinates will be slow", model.dim());
    }
    let hyper = settings.hyper.clone().unwrap_or_else(|| model.initial_hyper());
    model.check_hyper(&hyper)?;
    let pp = model.prior_params(&hyper)?;
    let l = &model.layout;
    let c = &model.cells;

    let approx = inner_fit(model, &hyper, None, &InnerSettings::default())?;
    let mut x = approx.mode;
    let weights: Vec<f64> = if settings.prior_only {
        vec![0.0; c.len()]
    } else {
        model.predictors(&x).iter().enumerate().map(|(i, &e)| model.cell_terms(i, e).2).collect()
    };

    let mut blocks = Vec::new();
    if !l.beta.is_empty() {
        let (na, nt) = (l.n_ages, l.n_years);
        let mut hb = DMatrix::from_diagonal_element(na, na, 1.0 / model.priors.wide.variance);
        let mut hk = model.rw2.as_ref().expect("kappa block present").scaled_dense() * pp.tau_kappa;
        for i in 0..c.len() {
            let (a, t) = (c.age[i], c.year[i]);
            hb[(a, a)] += weights[i] * x[l.kappa.start + t].powi(2);
            hk[(t, t)] += weights[i] * x[l.beta.start + a].powi(2);
        }
        let ab = dense_rows(&block_constraints(model, &l.beta), na);
        let mut kr = block_constraints(model, &l.kappa);
        if settings.prior_only && nt >= 2 {
            let mid = (nt as f64 - 1.0) / 2.0;
            kr.push((0..nt).map(|t| (t, t as f64 - mid)).collect());
            // start on the subspace of the extra row
            let norm: f64 = kr.last().unwrap().iter().map(|(_, v)| v * v).sum();
            let proj: f64 = kr.last().unwrap().iter().map(|&(t, v)| v * x[l.kappa.start + t]).sum::<f64>() / norm;
            for t in 0..nt {
                x[l.kappa.start + t] -= proj * (t as f64 - mid);
            }
        }
        let ak = dense_rows(&kr, nt);
        blocks.push(BlockProposal {
            name: "beta".into(),
            range: l.beta.clone(),
            m: proposal_matrix(hb, &ab, "beta proposal")?,
            scale: 2.38 / (na as f64).sqrt(),
        });
        blocks.push(BlockProposal {
            name: "kappa".into(),
            range: l.kappa.clone(),
            m: proposal_matrix(hk, &ak, "kappa proposal")?,
            scale: 2.38 / (nt as f64).sqrt(),
        });
    }
    let s = l.n_areas;
    let r_dense = model.spatial.structure.to_dense();
    let mut cells_by_field = vec![Vec::new(); l.n_fields()];
    for k in 0..l.n_fields() {
        let range = l.field_range(k);
        let co = pp.bym[model.field_group(k)];
        let mut h = DMatrix::zeros(2 * s, 2 * s);
        for i in 0..s {
            h[(i, i)] = co.a;
            h[(i, s + i)] = -co.b;
            h[(s + i, i)] = -co.b;
            h[(s + i, s + i)] = co.c;
        }
        for i in 0..s {
            for j in 0..s {
                h[(s + i, s + j)] += r_dense[(i, j)];
            }
        }
        for (i, &om) in c.omega.iter().enumerate() {
            if range.contains(&om) {
                h[(om - range.start, om - range.start)] += weights[i];
                cells_by_field[k].push(i);
            }
        }
        let a = dense_rows(&block_constraints(model, &range), 2 * s);
        blocks.push(BlockProposal {
            name: format!("omega_field{k}"),
            range: range.clone(),
            m: proposal_matrix(h, &a, "spatial proposal")?,
            scale: 2.38 / (2.0 * s as f64).sqrt(),
        });
    }
    let mut cells_by_age = vec![Vec::new(); l.n_ages];
    for i in 0..c.len() {
        cells_by_age[c.age[i]].push(i);
    }

    let eta = model.predictors(&x);
    let theta = model.hyper_to_internal(&hyper);
    let mut sm = Sampler {
        model,
        settings,
        x,
        eta,
        theta,
        pp,
        cells_by_age,
        cells_by_field,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let na_alpha = l.alpha.len();
    let nz = l.z.len();
    let n_hyper = if settings.fixed_hyper { 0 } else { sm.theta.len() };
    let mut alpha_scale: Vec<f64> = (0..na_alpha)
        .map(|a| {
            let w: f64 = sm.cells_by_age[a].iter().map(|&i| weights[i]).sum();
            (2.38 / (w + 1.0 / model.priors.wide.variance).sqrt()).ln()
        })
        .collect();
    let mut z_scale: Vec<f64> = (0..nz).map(|i| (2.38 / (weights[i] + sm.pp.tau_z).sqrt()).ln()).collect();
    let mut hyper_scale = vec![0.5f64.ln(); n_hyper];
    let mut block_log_scale: Vec<f64> = blocks.iter().map(|b| b.scale.ln()).collect();
    let mut alpha_cnt: Vec<Counter> = (0..na_alpha).map(|_| Counter::new()).collect();
    let mut z_cnt: Vec<Counter> = (0..nz).map(|_| Counter::new()).collect();
    let mut block_cnt: Vec<Counter> = blocks.iter().map(|_| Counter::new()).collect();
    let mut hyper_cnt: Vec<Counter> = (0..n_hyper).map(|_| Counter::new()).collect();
    let block_cells: Vec<Vec<usize>> = blocks.iter().map(|b| sm.block_cells(&b.name, &b.range)).collect();

    let mut columns = Vec::new();
    let mut kept_index = Vec::new();
    for (a, &age) in model.labels.ages.iter().enumerate() {
        if !l.alpha.is_empty() {
            columns.push(format!("alpha[{age}]"));
            kept_index.push(l.alpha.start + a);
        }
    }
    for (a, &age) in model.labels.ages.iter().enumerate() {
        if !l.beta.is_empty() {
            columns.push(format!("beta[{age}]"));
            kept_index.push(l.beta.start + a);
        }
    }
    for (t, &year) in model.labels.years.iter().enumerate() {
        if !l.kappa.is_empty() {
            columns.push(format!("kappa[{year}]"));
            kept_index.push(l.kappa.start + t);
        }
    }
    for k in 0..l.n_fields() {
        let (g, p) = (model.field_group(k), k % l.n_periods);
        for (sa, area) in model.labels.areas.iter().enumerate() {
            columns.push(format!("omega[{area},{g},{p}]"));
            kept_index.push(l.omega_index(sa, g, p));
        }
        for (sa, area) in model.labels.areas.iter().enumerate() {
            columns.push(format!("u[{area},{g},{p}]"));
            kept_index.push(l.u_index(sa, g, p));
        }
    }
    if settings.keep_z {
        for i in 0..nz {
            let (a, t, sa) = (c.age[i], c.year[i], c.area[i]);
            columns.push(format!("z[{},{},{}]", model.labels.ages[a], model.labels.years[t], model.labels.areas[sa]));
            kept_index.push(l.z.start + i);
        }
    }
    let hyper_names = model.hyper_names();
    columns.extend(hyper_names.iter().cloned());
    columns.push("log_posterior".into());

    let mut draws = Vec::with_capacity((settings.iterations - settings.burn_in) / settings.thin);
    let mut batch = 0;
    for it in 0..settings.iterations {
        let counting = it >= settings.burn_in;
        for a in 0..na_alpha {
            let j = l.alpha.start + a;
            let d = alpha_scale[a].exp() * rng.sample::<f64, _>(StandardNormal);
            let old = sm.x[j];
            let mut diff = -0.5 * ((old + d).powi(2) - old * old) / model.priors.wide.variance;
            for &i in &sm.cells_by_age[a] {
                diff += sm.cell_ll(i, sm.eta[i] + d) - sm.cell_ll(i, sm.eta[i]);
            }
            let acc = diff.is_finite() && rng.random::<f64>().ln() < diff;
            if acc {
                sm.x[j] += d;
                for &i in &sm.cells_by_age[a] {
                    sm.eta[i] += d;
                }
            }
            alpha_cnt[a].record(acc, counting);
        }
        for i in 0..nz {
            let j = l.z.start + i;
            let d = z_scale[i].exp() * rng.sample::<f64, _>(StandardNormal);
            let old = sm.x[j];
            let diff = -0.5 * sm.pp.tau_z * ((old + d).powi(2) - old * old) + sm.cell_ll(i, sm.eta[i] + d) - sm.cell_ll(i, sm.eta[i]);
            let acc = diff.is_finite() && rng.random::<f64>().ln() < diff;
            if acc {
                sm.x[j] += d;
                sm.eta[i] += d;
            }
            z_cnt[i].record(acc, counting);
        }
        for (bi, b) in blocks.iter_mut().enumerate() {
            b.scale = block_log_scale[bi].exp();
            let acc = sm.update_block(b, &block_cells[bi], &mut rng);
            block_cnt[bi].record(acc, counting);
        }
        if n_hyper > 0 {
            let (mut cur, _) = sm.hyper_target(&sm.theta.clone()).ok_or_else(|| Error::Numerical("hyperparameter target is not finite".into()))?;
            for h in 0..n_hyper {
                let mut prop = sm.theta.clone();
                prop[h] += hyper_scale[h].exp() * rng.sample::<f64, _>(StandardNormal);
                let (lo, hi) = if model.hyper_layout.phi.contains(&h) { LOGIT_PHI_RANGE } else { LOG_SIGMA_RANGE };
                let u: f64 = rng.random();
                let mut acc = false;
                if (lo..=hi).contains(&prop[h]) {
                    if let Some((v, pp)) = sm.hyper_target(&prop) {
                        if u.ln() < v - cur {
                            acc = true;
                            cur = v;
                            sm.theta = prop;
                            sm.pp = pp;
                        }
                    }
                }
                hyper_cnt[h].record(acc, counting);
            }
        }

        if !counting && (it + 1) % ADAPT_BATCH == 0 {
            batch += 1;
            for (s, c) in alpha_scale.iter_mut().zip(alpha_cnt.iter_mut()) {
                adapt(s, c.take_batch_rate(), 0.44, batch);
            }
            for (s, c) in z_scale.iter_mut().zip(z_cnt.iter_mut()) {
                adapt(s, c.take_batch_rate(), 0.44, batch);
            }
            for (s, c) in block_log_scale.iter_mut().zip(block_cnt.iter_mut()) {
                adapt(s, c.take_batch_rate(), 0.234, batch);
            }
            for (s, c) in hyper_scale.iter_mut().zip(hyper_cnt.iter_mut()) {
                adapt(s, c.take_batch_rate(), 0.44, batch);
            }
        }
        if counting && (it + 1 - settings.burn_in) % settings.thin == 0 {
            let mut row: Vec<f64> = kept_index.iter().map(|&j| sm.x[j]).collect();
            let h = model.hyper_from_internal(&sm.theta);
            for name in &hyper_names {
                row.push(hyper_value(&h, name));
            }
            let ll: f64 = (0..c.len()).map(|i| sm.cell_ll(i, sm.eta[i])).sum();
            row.push(ll + model.log_prior_latent(&sm.x, &sm.pp) + model.log_hyperprior(&sm.theta));
            draws.push(row);
        }
        if (it + 1) % 10_000 == 0 {
            info!("mcmc iteration {}/{}", it + 1, settings.iterations);
        }
    }

    let mut acceptance = Vec::new();
    let mut push = |name: String, cnts: &[Counter], scales: &[f64]| {
        if cnts.is_empty() {
            return;
        }
        let proposals: u64 = cnts.iter().map(|c| c.proposals).sum();
        let accepted: u64 = cnts.iter().map(|c| c.accepted).sum();
        acceptance.push(BlockAcceptance {
            block: name,
            proposals,
            accepted,
            rate: accepted as f64 / proposals.max(1) as f64,
            scale: scales.iter().map(|s| s.exp()).sum::<f64>() / scales.len() as f64,
        });
    };
    push("alpha".into(), &alpha_cnt, &alpha_scale);
    push("z".into(), &z_cnt, &z_scale);
    for (bi, b) in blocks.iter().enumerate() {
        push(b.name.clone(), std::slice::from_ref(&block_cnt[bi]), &block_log_scale[bi..=bi]);
    }
    for (h, name) in hyper_names.iter().enumerate().take(n_hyper) {
        push(name.clone(), std::slice::from_ref(&hyper_cnt[h]), &hyper_scale[h..=h]);
    }
    let mut low = Vec::new();
    for a in &acceptance {
        if a.rate < LOW_ACCEPTANCE {
            warn!("low acceptance rate {:.3} for block {}", a.rate, a.block);
            low.push(a.block.clone());
        }
    }
    let worst_site = alpha_cnt.iter().chain(&z_cnt).map(Counter::rate).fold(1.0, f64::min);
    if worst_site < LOW_ACCEPTANCE && !low.iter().any(|b| b == "alpha" || b == "z") {
        warn!("a single-site update has acceptance rate {worst_site:.3}");
    }
    Ok(McmcChain {
        columns,
        draws,
        seed: settings.seed,
        iterations: settings.iterations,
        burn_in: settings.burn_in,
        thin: settings.thin,
        acceptance,
        low_acceptance: low,
    })
}

fn hyper_value(h: &Hyperparameters, name: &str) -> f64 {
    match name {
        "sigma_z" => h.sigma_z,
        "sigma_kappa" => h.sigma_kappa,
        "sigma_omega" => h.sigma_omega[0],
        "phi" => h.phi[0],
        _ => {
            let (base, g) = name.rsplit_once("_g").expect("group suffix");
            let g: usize = g.parse().expect("group index");
            if base == "phi" {
                h.phi[g]
            } else {
                h.sigma_omega[g]
            }
        }
    }
}
