//! Latent-field layout, the Lee-Carter predictor with spatial and
//! overdispersion terms, the joint log density and the constraint system.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_factorial;

use crate::data::{AgeGrouping, MortalityDataset, PeriodMapping};
use crate::error::{Error, Result};
use crate::graph::{Bym2Coefficients, ConstraintPlan, SpatialGraph, SpatialStructure};
use crate::priors::{
    logit, pc_prior_mixing, pc_prior_stddev, quad_form, sigmoid, PcPriorMixing, PcPriorStdDev, PriorSettings, Rw2Prior,
    WideGaussianPrior,
};

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// One spatial field per age group.
    Static,
    /// One spatial field per age group and period (two periods).
    Period,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(Variant::Static),
            "period" => Ok(Variant::Period),
            other => Err(Error::InvalidParameter(format!("unknown variant '{other}' (expected static or period)"))),
        }
    }
}

/// Observation model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Family {
    /// `y ~ Poisson(E·exp(η))`.
    Poisson,
    /// The empirical log rate `ln(y/E)` is Gaussian around `η` with
    /// standard deviation `sd`. Used to check the Laplace approximation
    /// where it is exact.
    Gaussian { sd: f64 },
}

/// Switches for the latent blocks. Everything is on in the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentBlocks {
    pub alpha: bool,
    pub lee_carter: bool,
    pub spatial: bool,
    pub overdispersion: bool,
}

impl Default for LatentBlocks {
    fn default() -> Self {
        Self {
            alpha: true,
            lee_carter: true,
            spatial: true,
            overdispersion: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub variant: Variant,
    pub age_grouping: AgeGrouping,
    pub period_mapping: PeriodMapping,
    pub priors: PriorSettings,
    /// One `(σ_ω, φ)` pair for every age group instead of one per group.
    pub share_spatial_hyper: bool,
    pub family: Family,
    pub blocks: LatentBlocks,
}

impl ModelSpec {
    pub fn new(variant: Variant, age_grouping: AgeGrouping, period_mapping: PeriodMapping) -> Result<Self> {
        let expected = match variant {
            Variant::Static => 1,
            Variant::Period => 2,
        };
        if period_mapping.period_count() != expected {
            return Err(Error::InvalidParameter(format!(
                "{variant:?} variant needs {expected} period(s), mapping has {}",
                period_mapping.period_count()
            )));
        }
        Ok(Self {
            variant,
            age_grouping,
            period_mapping,
            priors: PriorSettings::default(),
            share_spatial_hyper: false,
            family: Family::Poisson,
            blocks: LatentBlocks::default(),
        })
    }

    pub fn n_ages(&self) -> usize {
        self.age_grouping.n_ages()
    }

    pub fn n_years(&self) -> usize {
        self.period_mapping.n_years()
    }

    pub fn n_groups(&self) -> usize {
        self.age_grouping.group_count()
    }

    pub fn n_periods(&self) -> usize {
        self.period_mapping.period_count()
    }
}

/// Offsets of each block in the concatenated latent vector.
///
/// Order: `α | β | κ | (ω_k, u_k) for k = g·P + p | z` where `z` only has
/// entries for cells with positive exposure.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub n_ages: usize,
    pub n_years: usize,
    pub n_areas: usize,
    pub n_groups: usize,
    pub n_periods: usize,
    pub alpha: Range<usize>,
    pub beta: Range<usize>,
    pub kappa: Range<usize>,
    pub spatial: Range<usize>,
    pub z: Range<usize>,
}

impl Layout {
    pub fn new(spec: &ModelSpec, n_areas: usize, n_active: usize) -> Self {
        let (a, t) = (spec.n_ages(), spec.n_years());
        let (g, p) = (spec.n_groups(), spec.n_periods());
        let b = spec.blocks;
        let alpha = 0..if b.alpha { a } else { 0 };
        let beta = alpha.end..alpha.end + if b.lee_carter { a } else { 0 };
        let kappa = beta.end..beta.end + if b.lee_carter { t } else { 0 };
        let spatial = kappa.end..kappa.end + if b.spatial { 2 * n_areas * g * p } else { 0 };
        let z = spatial.end..spatial.end + if b.overdispersion { n_active } else { 0 };
        Self {
            n_ages: a,
            n_years: t,
            n_areas,
            n_groups: g,
            n_periods: p,
            alpha,
            beta,
            kappa,
            spatial,
            z,
        }
    }

    pub fn dim(&self) -> usize {
        self.z.end
    }

    /// Size of the dense border `(α, β, κ)`.
    pub fn border_dim(&self) -> usize {
        self.kappa.end
    }

    /// Number of `(group, period)` spatial fields.
    pub fn n_fields(&self) -> usize {
        if self.spatial.is_empty() {
            0
        } else {
            self.n_groups * self.n_periods
        }
    }

    pub fn field(&self, group: usize, period: usize) -> usize {
        group * self.n_periods + period
    }

    /// Latent range of `(ω_k, u_k)`.
    pub fn field_range(&self, k: usize) -> Range<usize> {
        let start = self.spatial.start + 2 * self.n_areas * k;
        start..start + 2 * self.n_areas
    }

    pub fn omega_index(&self, area: usize, group: usize, period: usize) -> usize {
        self.field_range(self.field(group, period)).start + area
    }

    pub fn u_index(&self, area: usize, group: usize, period: usize) -> usize {
        self.field_range(self.field(group, period)).start + self.n_areas + area
    }
}

/// Latent field in named form.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentField {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub kappa: Vec<f64>,
    /// Indexed `(g·P + p)·S + s`.
    pub omega: Vec<f64>,
    pub u: Vec<f64>,
    /// Indexed like the dataset cells `(a·T + t)·S + s`; zero where the
    /// exposure is zero.
    pub z: Vec<f64>,
    pub n_areas: usize,
    pub n_periods: usize,
}

impl LatentField {
    pub fn zeros(n_ages: usize, n_years: usize, n_areas: usize, n_groups: usize, n_periods: usize) -> Self {
        let nf = n_areas * n_groups * n_periods;
        Self {
            alpha: vec![0.0; n_ages],
            beta: vec![0.0; n_ages],
            kappa: vec![0.0; n_years],
            omega: vec![0.0; nf],
            u: vec![0.0; nf],
            z: vec![0.0; n_ages * n_years * n_areas],
            n_areas,
            n_periods,
        }
    }

    pub fn omega_at(&self, area: usize, group: usize, period: usize) -> f64 {
        self.omega[(group * self.n_periods + period) * self.n_areas + area]
    }
}

/// Hyperparameters on their natural scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub sigma_z: f64,
    pub sigma_kappa: f64,
    /// One entry when the spatial hyperparameters are shared, otherwise one per age group.
    pub sigma_omega: Vec<f64>,
    pub phi: Vec<f64>,
}

impl Hyperparameters {
    pub fn sigma_omega_for(&self, group: usize) -> f64 {
        self.sigma_omega[group.min(self.sigma_omega.len() - 1)]
    }

    pub fn phi_for(&self, group: usize) -> f64 {
        self.phi[group.min(self.phi.len() - 1)]
    }

    pub fn validate(&self) -> Result<()> {
        let sig = [self.sigma_z, self.sigma_kappa];
        if sig.iter().chain(&self.sigma_omega).any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidParameter("standard deviations must be positive and finite".into()));
        }
        if self.phi.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidParameter("phi must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Position of each hyperparameter in the unconstrained vector
/// `(log σ_z, log σ_κ, log σ_ω..., logit φ...)`. Absent blocks have no entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HyperLayout {
    pub sigma_z: Option<usize>,
    pub sigma_kappa: Option<usize>,
    pub sigma_omega: Range<usize>,
    pub phi: Range<usize>,
}

impl HyperLayout {
    fn new(spec: &ModelSpec) -> Self {
        let mut next = 0;
        let mut take = |on: bool| {
            on.then(|| {
                next += 1;
                next - 1
            })
        };
        let sigma_z = take(spec.blocks.overdispersion);
        let sigma_kappa = take(spec.blocks.lee_carter);
        let n_sp = if !spec.blocks.spatial {
            0
        } else if spec.share_spatial_hyper {
            1
        } else {
            spec.n_groups()
        };
        let sigma_omega = next..next + n_sp;
        let phi = sigma_omega.end..sigma_omega.end + n_sp;
        Self {
            sigma_z,
            sigma_kappa,
            sigma_omega,
            phi,
        }
    }

    pub fn dim(&self) -> usize {
        self.phi.end
    }
}

/// Linear equality constraints `A x = e` stored row-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSystem {
    pub rows: Vec<Vec<(usize, f64)>>,
    pub rhs: Vec<f64>,
    pub labels: Vec<String>,
}

impl ConstraintSystem {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn dense(&self, n_cols: usize) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.rows.len(), n_cols);
        for (r, row) in self.rows.iter().enumerate() {
            for &(j, v) in row {
                a[(r, j)] += v;
            }
        }
        a
    }

    pub fn rhs_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.rhs)
    }

    /// `A x - e`.
    pub fn residual(&self, x: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .zip(&self.rhs)
            .map(|(row, e)| row.iter().map(|&(j, v)| v * x[j]).sum::<f64>() - e)
            .collect()
    }

    pub fn max_violation(&self, x: &[f64]) -> f64 {
        self.residual(x).iter().fold(0.0, |m, r| m.max(r.abs()))
    }
}

fn constraints_for(layout: &Layout, plan: &ConstraintPlan) -> ConstraintSystem {
    let mut sys = ConstraintSystem {
        rows: Vec::new(),
        rhs: Vec::new(),
        labels: Vec::new(),
    };
    if !layout.beta.is_empty() {
        sys.rows.push(layout.beta.clone().map(|j| (j, 1.0)).collect());
        sys.rhs.push(1.0);
        sys.labels.push("sum beta = 1".into());
        sys.rows.push(layout.kappa.clone().map(|j| (j, 1.0)).collect());
        sys.rhs.push(0.0);
        sys.labels.push("sum kappa = 0".into());
    }
    if !layout.spatial.is_empty() {
        for g in 0..layout.n_groups {
            for p in 0..layout.n_periods {
                for (c, comp) in plan.components.iter().enumerate() {
                    sys.rows.push(comp.iter().map(|&s| (layout.omega_index(s, g, p), 1.0)).collect());
                    sys.rhs.push(0.0);
                    sys.labels.push(format!("sum omega component {c} group {g} period {p} = 0"));
                }
            }
        }
    }
    sys
}

/// Identifiability constraints: `Σβ = 1`, `Σκ = 0` and, for every group and
/// period, `Σω = 0` over each connected component with more than one area.
/// Column indices follow [`Layout`]; `z` columns never appear.
pub fn build_constraints(spec: &ModelSpec, graph: &SpatialGraph) -> ConstraintSystem {
    let layout = Layout::new(spec, graph.n_areas(), 0);
    let plan = ConstraintPlan {
        components: graph.connected_components().cloned().collect(),
    };
    constraints_for(&layout, &plan)
}

/// Conditioning by kriging: `x - Q⁻¹Aᵀ(AQ⁻¹Aᵀ)⁻¹(Ax - e)`.
pub fn apply_constraints(x: &DVector<f64>, q: &DMatrix<f64>, a: &DMatrix<f64>, e: &DVector<f64>) -> Result<DVector<f64>> {
    let chol = crate::linalg::cholesky(q.clone(), "precision matrix")?;
    let v = chol.solve(&a.transpose());
    let av = a * &v;
    let av = crate::linalg::cholesky(av, "A Q⁻¹ Aᵀ")?;
    let r = a * x - e;
    Ok(x - v * av.solve(&r))
}

/// Active (positive exposure) cells in dataset order.
#[derive(Debug, Clone)]
pub struct Cells {
    pub age: Vec<usize>,
    pub year: Vec<usize>,
    pub area: Vec<usize>,
    /// Dataset cell index.
    pub cell: Vec<usize>,
    /// Latent index of the matching `ω` (unused without the spatial block).
    pub omega: Vec<usize>,
    pub deaths: Vec<f64>,
    pub exposure: Vec<f64>,
    /// Gaussian family: `ln(y/E)`; Poisson: `ln(y!) - y·ln(E)`.
    pub aux: Vec<f64>,
}

impl Cells {
    pub fn len(&self) -> usize {
        self.age.len()
    }

    pub fn is_empty(&self) -> bool {
        self.age.is_empty()
    }
}

/// Prior densities of every hyperparameter.
#[derive(Debug, Clone)]
pub struct HyperPriors {
    pub sigma_z: PcPriorStdDev,
    pub sigma_kappa: PcPriorStdDev,
    pub sigma_omega: PcPriorStdDev,
    pub phi: Option<PcPriorMixing>,
    pub wide: WideGaussianPrior,
}

/// Precision-level quantities derived from a hyperparameter value.
#[derive(Debug, Clone)]
pub struct PriorParams {
    pub tau_z: f64,
    pub tau_kappa: f64,
    /// One entry per age group.
    pub bym: Vec<Bym2Coefficients>,
}

/// A dataset bound to a model configuration.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub layout: Layout,
    pub hyper_layout: HyperLayout,
    pub spatial: SpatialStructure,
    pub rw2: Option<Rw2Prior>,
    pub constraints: ConstraintSystem,
    pub cells: Cells,
    pub priors: HyperPriors,
    pub labels: DataLabels,
    n_cells_total: usize,
}

/// Age, year and area labels of the bound dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataLabels {
    pub ages: Vec<u32>,
    pub years: Vec<i32>,
    pub areas: Vec<String>,
    pub gender: String,
}

impl Model {
    pub fn new(data: &MortalityDataset, graph: &SpatialGraph, spec: ModelSpec) -> Result<Self> {
        if spec.n_ages() != data.n_ages() {
            return Err(Error::InvalidParameter(format!(
                "age grouping covers {} ages, dataset has {}",
                spec.n_ages(),
                data.n_ages()
            )));
        }
        if spec.n_years() != data.n_years() {
            return Err(Error::InvalidParameter(format!(
                "period mapping covers {} years, dataset has {}",
                spec.n_years(),
                data.n_years()
            )));
        }
        if graph.n_areas() != data.n_areas() {
            return Err(Error::InvalidParameter(format!(
                "graph has {} areas, dataset has {}",
                graph.n_areas(),
                data.n_areas()
            )));
        }
        if let Family::Gaussian { sd } = spec.family {
            if !(sd > 0.0) {
                return Err(Error::InvalidParameter("Gaussian family needs sd > 0".into()));
            }
        }
        let spatial = SpatialStructure::new(graph)?;
        let rw2 = if spec.blocks.lee_carter {
            Some(Rw2Prior::new(spec.n_years())?)
        } else {
            None
        };
        let p = &spec.priors;
        let phi = if spec.blocks.spatial {
            Some(pc_prior_mixing(p.phi.u, p.phi.alpha, &spatial.generalized_inverse_eigenvalues)?)
        } else {
            None
        };
        let priors = HyperPriors {
            sigma_z: pc_prior_stddev(p.sigma_z.u, p.sigma_z.alpha)?,
            sigma_kappa: pc_prior_stddev(p.sigma_kappa.u, p.sigma_kappa.alpha)?,
            sigma_omega: pc_prior_stddev(p.sigma_omega.u, p.sigma_omega.alpha)?,
            phi,
            wide: WideGaussianPrior::new(p.wide_variance)?,
        };

        let (na, nt, ns) = (data.n_ages(), data.n_years(), data.n_areas());
        let active: Vec<usize> = (0..data.n_cells()).filter(|&c| data.exposures()[c] > 0.0).collect();
        let layout = Layout::new(&spec, ns, active.len());
        let mut cells = Cells {
            age: Vec::with_capacity(active.len()),
            year: Vec::with_capacity(active.len()),
            area: Vec::with_capacity(active.len()),
            cell: active.clone(),
            omega: Vec::with_capacity(active.len()),
            deaths: Vec::with_capacity(active.len()),
            exposure: Vec::with_capacity(active.len()),
            aux: Vec::with_capacity(active.len()),
        };
        for &c in &active {
            let (a, t, s) = data.cell_position(c);
            let y = data.deaths()[c];
            let e = data.exposures()[c];
            cells.age.push(a);
            cells.year.push(t);
            cells.area.push(s);
            cells.omega.push(if spec.blocks.spatial {
                layout.omega_index(s, spec.age_grouping.group_of(a), spec.period_mapping.period_of(t))
            } else {
                usize::MAX
            });
            cells.deaths.push(y as f64);
            cells.exposure.push(e);
            cells.aux.push(match spec.family {
                Family::Poisson => ln_factorial(y) - y as f64 * e.ln(),
                Family::Gaussian { .. } => {
                    if y == 0 {
                        return Err(Error::Data("Gaussian family needs positive death counts".into()));
                    }
                    (y as f64 / e).ln()
                }
            });
        }
        let constraints = constraints_for(&layout, &spatial.plan);
        Ok(Self {
            hyper_layout: HyperLayout::new(&spec),
            spec,
            layout,
            spatial,
            rw2,
            constraints,
            cells,
            priors,
            labels: DataLabels {
                ages: data.ages().to_vec(),
                years: data.years().to_vec(),
                areas: data.areas().to_vec(),
                gender: data.gender_label.clone(),
            },
            n_cells_total: na * nt * ns,
        })
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn n_hyper(&self) -> usize {
        self.hyper_layout.dim()
    }

    pub fn n_cells_total(&self) -> usize {
        self.n_cells_total
    }

    /// Hyperparameter names matching the unconstrained vector.
    pub fn hyper_names(&self) -> Vec<String> {
        let h = &self.hyper_layout;
        let mut names = vec![String::new(); h.dim()];
        if let Some(i) = h.sigma_z {
            names[i] = "sigma_z".into();
        }
        if let Some(i) = h.sigma_kappa {
            names[i] = "sigma_kappa".into();
        }
        let shared = h.sigma_omega.len() == 1;
        for (g, i) in h.sigma_omega.clone().enumerate() {
            names[i] = if shared { "sigma_omega".into() } else { format!("sigma_omega_g{g}") };
        }
        for (g, i) in h.phi.clone().enumerate() {
            names[i] = if shared { "phi".into() } else { format!("phi_g{g}") };
        }
        names
    }

    /// Default starting hyperparameters: every σ = 0.1, φ = 0.5.
    pub fn initial_hyper(&self) -> Hyperparameters {
        let n = self.hyper_layout.sigma_omega.len().max(1);
        Hyperparameters {
            sigma_z: 0.1,
            sigma_kappa: 0.1,
            sigma_omega: vec![0.1; n],
            phi: vec![0.5; n],
        }
    }

    /// Validates `h` and checks that each spatial vector has one entry or one per group.
    pub fn check_hyper(&self, h: &Hyperparameters) -> Result<()> {
        h.validate()?;
        let n = self.hyper_layout.sigma_omega.len().max(1);
        for (name, len) in [("sigma_omega", h.sigma_omega.len()), ("phi", h.phi.len())] {
            if len != 1 && len != n {
                return Err(Error::InvalidParameter(format!("{name} has {len} entries, expected 1 or {n}")));
            }
        }
        Ok(())
    }

    pub fn hyper_to_internal(&self, h: &Hyperparameters) -> Vec<f64> {
        let hl = &self.hyper_layout;
        let mut v = vec![0.0; hl.dim()];
        if let Some(i) = hl.sigma_z {
            v[i] = h.sigma_z.ln();
        }
        if let Some(i) = hl.sigma_kappa {
            v[i] = h.sigma_kappa.ln();
        }
        for (g, i) in hl.sigma_omega.clone().enumerate() {
            v[i] = h.sigma_omega_for(g).ln();
        }
        for (g, i) in hl.phi.clone().enumerate() {
            v[i] = logit(h.phi_for(g));
        }
        v
    }

    /// Inverse of [`Model::hyper_to_internal`]; absent hyperparameters take
    /// their default values.
    pub fn hyper_from_internal(&self, theta: &[f64]) -> Hyperparameters {
        let hl = &self.hyper_layout;
        let mut h = self.initial_hyper();
        if let Some(i) = hl.sigma_z {
            h.sigma_z = theta[i].exp();
        }
        if let Some(i) = hl.sigma_kappa {
            h.sigma_kappa = theta[i].exp();
        }
        if !hl.sigma_omega.is_empty() {
            h.sigma_omega = theta[hl.sigma_omega.clone()].iter().map(|v| v.exp()).collect();
            h.phi = theta[hl.phi.clone()].iter().map(|&v| sigmoid(v)).collect();
        }
        h
    }

    /// Log hyperprior density on the unconstrained scale.
    pub fn log_hyperprior(&self, theta: &[f64]) -> f64 {
        let hl = &self.hyper_layout;
        let p = &self.priors;
        let mut lp = 0.0;
        if let Some(i) = hl.sigma_z {
            lp += p.sigma_z.log_density_log_scale(theta[i]);
        }
        if let Some(i) = hl.sigma_kappa {
            lp += p.sigma_kappa.log_density_log_scale(theta[i]);
        }
        for i in hl.sigma_omega.clone() {
            lp += p.sigma_omega.log_density_log_scale(theta[i]);
        }
        if let Some(mix) = &p.phi {
            for i in hl.phi.clone() {
                lp += mix.log_density_logit(theta[i]);
            }
        }
        lp
    }

    pub fn prior_params(&self, h: &Hyperparameters) -> Result<PriorParams> {
        let bym = if self.spec.blocks.spatial {
            (0..self.layout.n_groups)
                .map(|g| {
                    let phi = h.phi_for(g);
                    if !(phi > 0.0 && phi < 1.0) {
                        return Err(Error::InvalidParameter(format!("phi must lie strictly inside (0, 1), got {phi}")));
                    }
                    Bym2Coefficients::new(phi, h.sigma_omega_for(g))
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let check = |s: f64, name: &str| {
            if s > 0.0 && s.is_finite() {
                Ok(1.0 / (s * s))
            } else {
                Err(Error::InvalidParameter(format!("{name} must be positive, got {s}")))
            }
        };
        Ok(PriorParams {
            tau_z: check(h.sigma_z, "sigma_z")?,
            tau_kappa: check(h.sigma_kappa, "sigma_kappa")?,
            bym,
        })
    }

    /// Group of a spatial field index `k`.
    pub fn field_group(&self, k: usize) -> usize {
        k / self.layout.n_periods
    }

    /// Linear predictor `η` of every active cell.
    pub fn predictors(&self, x: &[f64]) -> Vec<f64> {
        let l = &self.layout;
        let c = &self.cells;
        let n = c.len();
        let mut eta = vec![0.0; n];
        for i in 0..n {
            let mut v = 0.0;
            if !l.alpha.is_empty() {
                v += x[l.alpha.start + c.age[i]];
            }
            if !l.beta.is_empty() {
                v += x[l.beta.start + c.age[i]] * x[l.kappa.start + c.year[i]];
            }
            if !l.spatial.is_empty() {
                v += x[c.omega[i]];
            }
            if !l.z.is_empty() {
                v += x[l.z.start + i];
            }
            eta[i] = v;
        }
        eta
    }

    /// Per-cell log-likelihood, its first derivative and the negated second
    /// derivative with respect to `η`.
    #[inline]
    pub fn cell_terms(&self, i: usize, eta: f64) -> (f64, f64, f64) {
        let c = &self.cells;
        match self.spec.family {
            Family::Poisson => {
                let mu = c.exposure[i] * eta.exp();
                (c.deaths[i] * eta - mu - c.aux[i], c.deaths[i] - mu, mu)
            }
            Family::Gaussian { sd } => {
                let prec = 1.0 / (sd * sd);
                let r = c.aux[i] - eta;
                (-0.5 * (LN_2PI + 2.0 * sd.ln()) - 0.5 * prec * r * r, prec * r, prec)
            }
        }
    }

    pub fn log_likelihood(&self, x: &[f64]) -> f64 {
        self.predictors(x)
            .iter()
            .enumerate()
            .map(|(i, &e)| self.cell_terms(i, e).0)
            .sum()
    }

    /// `Q x` for the block-diagonal latent prior precision (β uses its
    /// unconstrained Gaussian precision).
    pub fn prior_precision_times(&self, x: &[f64], pp: &PriorParams) -> Vec<f64> {
        let l = &self.layout;
        let mut out = vec![0.0; x.len()];
        let v = self.priors.wide.variance;
        for j in l.alpha.clone().chain(l.beta.clone()) {
            out[j] = x[j] / v;
        }
        if let Some(rw2) = &self.rw2 {
            let scale = pp.tau_kappa * rw2.scaling_factor;
            let k0 = l.kappa.start;
            for (val, (i, j)) in rw2.structure.iter() {
                out[k0 + i] += scale * val * x[k0 + j];
            }
        }
        let s = l.n_areas;
        for k in 0..l.n_fields() {
            let co = pp.bym[self.field_group(k)];
            let r = l.field_range(k);
            let (w0, u0) = (r.start, r.start + s);
            for i in 0..s {
                out[w0 + i] = co.a * x[w0 + i] - co.b * x[u0 + i];
                out[u0 + i] = -co.b * x[w0 + i] + co.c * x[u0 + i];
            }
            for (val, (i, j)) in self.spatial.structure.matrix.iter() {
                out[u0 + i] += val * x[u0 + j];
            }
        }
        for j in l.z.clone() {
            out[j] = pp.tau_z * x[j];
        }
        out
    }

    /// Log prior density of the latent vector restricted to the constraint
    /// subspace (improper along the linear direction of κ).
    pub fn log_prior_latent(&self, x: &[f64], pp: &PriorParams) -> f64 {
        let l = &self.layout;
        let wide = &self.priors.wide;
        let mut lp = wide.log_density(&x[l.alpha.clone()]);
        if let Some(rw2) = &self.rw2 {
            let a = l.beta.len() as f64;
            let vsum = wide.variance * a;
            lp += wide.log_density(&x[l.beta.clone()]) + 0.5 * (LN_2PI + vsum.ln()) + 1.0 / (2.0 * vsum) - 0.5 * a.ln();
            let kappa = &x[l.kappa.clone()];
            lp += rw2.log_density(kappa, 1.0 / pp.tau_kappa.sqrt());
        }
        let s = l.n_areas;
        let nc = self.spatial.n_constrained() as f64;
        for k in 0..l.n_fields() {
            let co = pp.bym[self.field_group(k)];
            let r = l.field_range(k);
            let (om, u) = (&x[r.start..r.start + s], &x[r.start + s..r.end]);
            let mut q = 0.0;
            for i in 0..s {
                q += co.a * om[i] * om[i] - 2.0 * co.b * om[i] * u[i] + co.c * u[i] * u[i];
            }
            q += quad_form(&self.spatial.structure.matrix, u);
            let logdet = nc * co.c.ln() + (s as f64 - nc) * co.a.ln() + self.spatial.log_pseudo_det;
            lp += -0.5 * (2.0 * s as f64 - nc) * LN_2PI + 0.5 * logdet - 0.5 * q;
        }
        if !l.z.is_empty() {
            let n = l.z.len() as f64;
            let ss: f64 = x[l.z.clone()].iter().map(|v| v * v).sum();
            lp += 0.5 * n * (pp.tau_z.ln() - LN_2PI) - 0.5 * pp.tau_z * ss;
        }
        lp
    }

    /// Log-likelihood plus latent log prior plus log hyperprior (on the
    /// unconstrained scale).
    pub fn joint_log_density(&self, x: &[f64], h: &Hyperparameters) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::InvalidParameter(format!("latent vector has length {}, expected {}", x.len(), self.dim())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("latent vector has non-finite entries".into()));
        }
        let pp = self.prior_params(h)?;
        let theta = self.hyper_to_internal(h);
        Ok(self.log_likelihood(x) + self.log_prior_latent(x, &pp) + self.log_hyperprior(&theta))
    }

    /// Gradient of the joint log density with respect to the latent vector.
    pub fn gradient(&self, x: &[f64], pp: &PriorParams) -> Vec<f64> {
        let mut g = self.prior_precision_times(x, pp);
        for v in g.iter_mut() {
            *v = -*v;
        }
        let eta = self.predictors(x);
        let l = &self.layout;
        let c = &self.cells;
        for (i, &e) in eta.iter().enumerate() {
            let r = self.cell_terms(i, e).1;
            let (a, t) = (c.age[i], c.year[i]);
            if !l.alpha.is_empty() {
                g[l.alpha.start + a] += r;
            }
            if !l.beta.is_empty() {
                g[l.beta.start + a] += r * x[l.kappa.start + t];
                g[l.kappa.start + t] += r * x[l.beta.start + a];
            }
            if !l.spatial.is_empty() {
                g[c.omega[i]] += r;
            }
            if !l.z.is_empty() {
                g[l.z.start + i] += r;
            }
        }
        g
    }

    pub fn to_vector(&self, f: &LatentField) -> Vec<f64> {
        let l = &self.layout;
        let mut x = vec![0.0; l.dim()];
        x[l.alpha.clone()].copy_from_slice(&f.alpha[..l.alpha.len()]);
        if !l.beta.is_empty() {
            x[l.beta.clone()].copy_from_slice(&f.beta);
            x[l.kappa.clone()].copy_from_slice(&f.kappa);
        }
        let s = l.n_areas;
        for k in 0..l.n_fields() {
            let r = l.field_range(k);
            x[r.start..r.start + s].copy_from_slice(&f.omega[k * s..(k + 1) * s]);
            x[r.start + s..r.end].copy_from_slice(&f.u[k * s..(k + 1) * s]);
        }
        for (i, &cell) in self.cells.cell.iter().enumerate() {
            if !l.z.is_empty() {
                x[l.z.start + i] = f.z[cell];
            }
        }
        x
    }

    pub fn to_field(&self, x: &[f64]) -> LatentField {
        let l = &self.layout;
        let mut f = LatentField::zeros(l.n_ages, l.n_years, l.n_areas, l.n_groups, l.n_periods);
        if !l.alpha.is_empty() {
            f.alpha.copy_from_slice(&x[l.alpha.clone()]);
        }
        if !l.beta.is_empty() {
            f.beta.copy_from_slice(&x[l.beta.clone()]);
            f.kappa.copy_from_slice(&x[l.kappa.clone()]);
        }
        let s = l.n_areas;
        for k in 0..l.n_fields() {
            let r = l.field_range(k);
            f.omega[k * s..(k + 1) * s].copy_from_slice(&x[r.start..r.start + s]);
            f.u[k * s..(k + 1) * s].copy_from_slice(&x[r.start + s..r.end]);
        }
        if !l.z.is_empty() {
            for (i, &cell) in self.cells.cell.iter().enumerate() {
                f.z[cell] = x[l.z.start + i];
            }
        }
        f
    }

    /// Log rate of any cell, including zero-exposure cells (whose `z` is 0).
    pub fn predictor(&self, f: &LatentField, age: usize, year: usize, area: usize) -> Result<f64> {
        predictor(f, &self.spec, (age, year, area))
    }
}

/// `α_x + β_x·κ_t + ω_{s,g(x),p(t)} + z_{xts}`.
pub fn predictor(f: &LatentField, spec: &ModelSpec, cell: (usize, usize, usize)) -> Result<f64> {
    let (a, t, s) = cell;
    let (na, nt, ns) = (f.alpha.len(), f.kappa.len(), f.n_areas);
    if a >= na || t >= nt || s >= ns {
        return Err(Error::InvalidParameter(format!(
            "cell ({a}, {t}, {s}) out of range for {na} ages x {nt} years x {ns} areas"
        )));
    }
    let g = spec.age_grouping.group_of(a);
    let p = spec.period_mapping.period_of(t);
    Ok(f.alpha[a] + f.beta[a] * f.kappa[t] + f.omega_at(s, g, p) + f.z[(a * nt + t) * ns + s])
}
