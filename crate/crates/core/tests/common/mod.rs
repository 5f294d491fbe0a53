//! Dense reference implementations shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use statrs::function::factorial::ln_factorial;

use spatial_lc::data::{default_age_grouping, period_mapping, MortalityDataset};
use spatial_lc::graph::SpatialGraph;
use spatial_lc::model::{Family, Hyperparameters, Model, ModelSpec, Variant};
use spatial_lc::priors::logit;
use spatial_lc::simulate::{area_ids, demographic_profile};

pub const LN_2PI: f64 = 1.8378770664093453;

/// Poisson data from a Lee-Carter surface with a fixed spatial tilt.
pub fn lee_carter_data(n_ages: usize, n_years: usize, graph: &SpatialGraph, exposure: f64, seed: u64) -> MortalityDataset {
    let ns = graph.n_areas();
    let ages: Vec<u32> = (60..60 + n_ages as u32).collect();
    let years: Vec<i32> = (2000..2000 + n_years as i32).collect();
    let (alpha, beta, kappa) = demographic_profile(&ages, n_years, 2.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut deaths = Vec::new();
    let mut exposures = Vec::new();
    for a in 0..n_ages {
        for t in 0..n_years {
            for s in 0..ns {
                let tilt = 0.1 * (s as f64 - (ns as f64 - 1.0) / 2.0);
                let mu = exposure * (alpha[a] + beta[a] * kappa[t] + tilt).exp();
                deaths.push(Poisson::new(mu).unwrap().sample(&mut rng) as u64);
                exposures.push(exposure);
            }
        }
    }
    MortalityDataset::new(ages, years, area_ids(ns), deaths, exposures).unwrap()
}

pub fn pair_graph() -> SpatialGraph {
    SpatialGraph::from_edges(2, &[(0, 1)]).unwrap()
}

pub fn static_model(data: &MortalityDataset, graph: &SpatialGraph) -> Model {
    let spec = ModelSpec::new(
        Variant::Static,
        default_age_grouping(data.ages()).unwrap(),
        period_mapping(data.years(), None).unwrap(),
    )
    .unwrap();
    Model::new(data, graph, spec).unwrap()
}

pub fn hyper(sigma_z: f64, sigma_kappa: f64, sigma_omega: f64, phi: f64, groups: usize) -> Hyperparameters {
    Hyperparameters {
        sigma_z,
        sigma_kappa,
        sigma_omega: vec![sigma_omega; groups],
        phi: vec![phi; groups],
    }
}

/// Orthonormal basis of the null space of a full-row-rank matrix.
pub fn null_basis(b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = b.ncols();
    if b.nrows() == 0 {
        return DMatrix::identity(n, n);
    }
    let bbt = b * b.transpose();
    let proj = DMatrix::identity(n, n) - b.transpose() * bbt.try_inverse().unwrap() * b;
    let eig = SymmetricEigen::new(proj);
    let cols: Vec<DVector<f64>> = (0..n)
        .filter(|&i| eig.eigenvalues[i] > 0.5)
        .map(|i| eig.eigenvectors.column(i).into_owned())
        .collect();
    assert_eq!(cols.len(), n - b.nrows());
    DMatrix::from_columns(&cols)
}

/// Moore-Penrose inverse of a symmetric PSD matrix by eigendecomposition.
pub fn sym_pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let tol = 1e-10 * eig.eigenvalues.amax();
    let d = DVector::from_iterator(
        m.nrows(),
        eig.eigenvalues.iter().map(|&l| if l > tol { 1.0 / l } else { 0.0 }),
    );
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

pub fn geometric_mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x.ln(), n + 1));
    (s / n as f64).exp()
}

pub fn besag_dense(graph: &SpatialGraph) -> DMatrix<f64> {
    let n = graph.n_areas();
    let mut r = DMatrix::zeros(n, n);
    for i in 0..n {
        for &j in graph.neighbors(i) {
            r[(i, i)] += 1.0;
            r[(i, j)] -= 1.0;
        }
    }
    r
}

pub fn rw2_dense(t: usize) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(t - 2, t);
    for r in 0..t - 2 {
        d[(r, r)] = 1.0;
        d[(r, r + 1)] = -2.0;
        d[(r, r + 2)] = 1.0;
    }
    d.transpose() * d
}

/// Geometric mean of the diagonal of the generalised inverse.
pub fn dense_scaling(r: &DMatrix<f64>) -> f64 {
    geometric_mean(sym_pinv(r).diagonal().iter().copied())
}

/// Log determinant of `NᵀMN` dropping `drop` (near-)zero eigenvalues.
fn restricted_log_det(m: &DMatrix<f64>, n: &DMatrix<f64>, drop: usize) -> f64 {
    let r = n.transpose() * m * n;
    let mut ev: Vec<f64> = SymmetricEigen::new(r).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev[drop..].iter().map(|e| e.ln()).sum()
}

struct OracleCell {
    age: usize,
    year: usize,
    deaths: f64,
    exposure: f64,
    ln_fact: f64,
    log_rate: f64,
    omega: Option<usize>,
    z: Option<usize>,
}

/// The exact joint log density of a connected-graph instance written with
/// dense matrices straight from the generative definitions.
pub struct DenseOracle {
    pub dim: usize,
    alpha: std::ops::Range<usize>,
    beta: std::ops::Range<usize>,
    kappa: std::ops::Range<usize>,
    cells: Vec<OracleCell>,
    family: Family,
    /// Latent prior precision on the constraint subspace.
    pub q: DMatrix<f64>,
    /// Prior normalising constants plus the hyperprior.
    pub constant: f64,
    pub a: DMatrix<f64>,
    pub e: DVector<f64>,
}

impl DenseOracle {
    pub fn new(model: &Model, data: &MortalityDataset, graph: &SpatialGraph, h: &Hyperparameters) -> Self {
        assert_eq!(graph.components().len(), 1, "oracle handles connected graphs");
        let l = &model.layout;
        let spec = &model.spec;
        let n = l.dim();
        let p = &spec.priors;
        let v = p.wide_variance;
        let mut q = DMatrix::zeros(n, n);
        let mut constant = 0.0;
        let mut rows: Vec<(Vec<usize>, f64)> = Vec::new();

        for j in l.alpha.clone() {
            q[(j, j)] = 1.0 / v;
        }
        constant += -0.5 * l.alpha.len() as f64 * (LN_2PI + v.ln());
        let lambda = |u: f64, alpha: f64| -alpha.ln() / u;
        let log_pc = |s: f64, u: f64, alpha: f64| lambda(u, alpha).ln() - lambda(u, alpha) * s + s.ln();

        if spec.blocks.lee_carter {
            let na = l.beta.len() as f64;
            for j in l.beta.clone() {
                q[(j, j)] = 1.0 / v;
            }
            constant += -0.5 * na * (LN_2PI + v.ln()) + 0.5 * (LN_2PI + v.ln()) + 1.0 / (2.0 * v * na);
            let t = l.kappa.len();
            let r = rw2_dense(t);
            let scaled = &r * dense_scaling(&r) / (h.sigma_kappa * h.sigma_kappa);
            let ones = DMatrix::from_element(1, t, 1.0);
            constant += -0.5 * (t - 2) as f64 * LN_2PI + 0.5 * restricted_log_det(&scaled, &null_basis(&ones), 1);
            q.view_mut((l.kappa.start, l.kappa.start), (t, t)).copy_from(&scaled);
            constant += log_pc(h.sigma_kappa, p.sigma_kappa.u, p.sigma_kappa.alpha);
            rows.push((l.beta.clone().collect(), 1.0));
            rows.push((l.kappa.clone().collect(), 0.0));
        }

        let s = l.n_areas;
        if spec.blocks.spatial {
            let r = besag_dense(graph);
            let rs = &r * dense_scaling(&r);
            for g in 0..l.n_groups {
                for per in 0..l.n_periods {
                    let (sigma, phi) = (h.sigma_omega_for(g), h.phi_for(g));
                    // ω | u ~ N(σ√φ·u, σ²(1-φ)I), u ~ scaled Besag
                    let mut m = DMatrix::zeros(s, 2 * s);
                    for i in 0..s {
                        m[(i, i)] = 1.0;
                        m[(i, s + i)] = -sigma * phi.sqrt();
                    }
                    let mut qf = m.transpose() * m / (sigma * sigma * (1.0 - phi));
                    let mut lower = qf.view_mut((s, s), (s, s));
                    lower += &rs;
                    let mut sum_omega = DMatrix::zeros(1, 2 * s);
                    for i in 0..s {
                        sum_omega[(0, i)] = 1.0;
                    }
                    constant += -0.5 * (2 * s - 1) as f64 * LN_2PI + 0.5 * restricted_log_det(&qf, &null_basis(&sum_omega), 0);
                    let start = l.field_range(l.field(g, per)).start;
                    q.view_mut((start, start), (2 * s, 2 * s)).copy_from(&qf);
                    rows.push(((start..start + s).collect(), 0.0));
                }
            }
            let n_sp = model.hyper_layout.sigma_omega.len();
            for g in 0..n_sp {
                constant += log_pc(h.sigma_omega_for(g), p.sigma_omega.u, p.sigma_omega.alpha);
                constant += model.priors.phi.as_ref().unwrap().log_density_logit(logit(h.phi_for(g)));
            }
        }

        let mut cells = Vec::new();
        let mut next_z = l.z.start;
        for c in 0..data.n_cells() {
            let (a, t, sa) = data.cell_position(c);
            let e = data.exposures()[c];
            if e <= 0.0 {
                continue;
            }
            let y = data.deaths()[c];
            let omega = spec.blocks.spatial.then(|| {
                l.omega_index(sa, spec.age_grouping.group_of(a), spec.period_mapping.period_of(t))
            });
            let z = spec.blocks.overdispersion.then(|| {
                next_z += 1;
                next_z - 1
            });
            cells.push(OracleCell {
                age: a,
                year: t,
                deaths: y as f64,
                exposure: e,
                ln_fact: ln_factorial(y),
                log_rate: (y as f64 / e).ln(),
                omega,
                z,
            });
        }
        if spec.blocks.overdispersion {
            let tz = 1.0 / (h.sigma_z * h.sigma_z);
            for j in l.z.clone() {
                q[(j, j)] = tz;
            }
            constant += 0.5 * l.z.len() as f64 * (tz.ln() - LN_2PI);
            constant += log_pc(h.sigma_z, p.sigma_z.u, p.sigma_z.alpha);
        }

        let mut a = DMatrix::zeros(rows.len(), n);
        let mut e = DVector::zeros(rows.len());
        for (i, (cols, rhs)) in rows.iter().enumerate() {
            for &j in cols {
                a[(i, j)] = 1.0;
            }
            e[i] = *rhs;
        }
        Self {
            dim: n,
            alpha: l.alpha.clone(),
            beta: l.beta.clone(),
            kappa: l.kappa.clone(),
            cells,
            family: spec.family,
            q,
            constant,
            a,
            e,
        }
    }

    fn eta_gradient(&self, c: &OracleCell, x: &[f64]) -> (f64, Vec<(usize, f64)>) {
        let mut eta = 0.0;
        let mut d = Vec::new();
        if !self.alpha.is_empty() {
            eta += x[self.alpha.start + c.age];
            d.push((self.alpha.start + c.age, 1.0));
        }
        if !self.beta.is_empty() {
            let (b, k) = (self.beta.start + c.age, self.kappa.start + c.year);
            eta += x[b] * x[k];
            d.push((b, x[k]));
            d.push((k, x[b]));
        }
        if let Some(o) = c.omega {
            eta += x[o];
            d.push((o, 1.0));
        }
        if let Some(z) = c.z {
            eta += x[z];
            d.push((z, 1.0));
        }
        (eta, d)
    }

    /// Value, first and negated second derivative of one cell's log-likelihood in `η`.
    fn cell(&self, c: &OracleCell, eta: f64) -> (f64, f64, f64) {
        match self.family {
            Family::Poisson => {
                let mu = c.exposure * eta.exp();
                (c.deaths * (eta + c.exposure.ln()) - mu - c.ln_fact, c.deaths - mu, mu)
            }
            Family::Gaussian { sd } => {
                let r = c.log_rate - eta;
                (-0.5 * LN_2PI - sd.ln() - 0.5 * r * r / (sd * sd), r / (sd * sd), 1.0 / (sd * sd))
            }
        }
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let xv = DVector::from_column_slice(x);
        let mut ll = 0.0;
        for c in &self.cells {
            let (eta, _) = self.eta_gradient(c, x);
            ll += self.cell(c, eta).0;
        }
        ll - 0.5 * xv.dot(&(&self.q * &xv)) + self.constant
    }

    pub fn gradient(&self, x: &[f64]) -> DVector<f64> {
        let xv = DVector::from_column_slice(x);
        let mut g = -(&self.q * &xv);
        for c in &self.cells {
            let (eta, d) = self.eta_gradient(c, x);
            let r = self.cell(c, eta).1;
            for (j, v) in d {
                g[j] += r * v;
            }
        }
        g
    }

    pub fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        let mut h = -self.q.clone();
        for c in &self.cells {
            let (eta, d) = self.eta_gradient(c, x);
            let (_, r, w) = self.cell(c, eta);
            for &(i, vi) in &d {
                for &(j, vj) in &d {
                    h[(i, j)] -= w * vi * vj;
                }
            }
            if !self.beta.is_empty() {
                let (b, k) = (self.beta.start + c.age, self.kappa.start + c.year);
                h[(b, k)] += r;
                h[(k, b)] += r;
            }
        }
        h
    }

    /// Particular solution of the constraints and an orthonormal basis of
    /// their null space.
    pub fn subspace(&self) -> (DVector<f64>, DMatrix<f64>) {
        let n = null_basis(&self.a);
        if self.a.nrows() == 0 {
            return (DVector::zeros(self.dim), n);
        }
        let aat = &self.a * self.a.transpose();
        let x0 = self.a.transpose() * aat.try_inverse().unwrap() * &self.e;
        (x0, n)
    }

    /// Full Newton on the exact density over the constraint subspace.
    pub fn newton_mode(&self, start: &[f64]) -> DVector<f64> {
        let (x0, nb) = self.subspace();
        let mut w = nb.transpose() * (DVector::from_column_slice(start) - &x0);
        let point = |w: &DVector<f64>| &x0 + &nb * w;
        let mut f = self.log_density(point(&w).as_slice());
        for _ in 0..200 {
            let x = point(&w);
            let g = nb.transpose() * self.gradient(x.as_slice());
            let mut neg_h = -(nb.transpose() * self.hessian(x.as_slice()) * &nb);
            let mut shift = 0.0;
            let chol = loop {
                match neg_h.clone().cholesky() {
                    Some(c) => break c,
                    None => {
                        shift = if shift == 0.0 { 1e-6 } else { shift * 10.0 };
                        neg_h += DMatrix::identity(w.len(), w.len()) * shift;
                    }
                }
            };
            let step = chol.solve(&g);
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let cand = &w + &step * t;
                let fc = self.log_density(point(&cand).as_slice());
                if fc >= f - 1e-12 * f.abs() {
                    w = cand;
                    f = fc;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted || step.amax() * t < 1e-13 {
                break;
            }
        }
        point(&w)
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}
