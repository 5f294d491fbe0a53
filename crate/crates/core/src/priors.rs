//! Priors for the temporal index and the hyperparameters: the scaled RW2
//! structure for κ, penalised-complexity priors for standard deviations and
//! for the BYM2 mixing parameter, and the wide Gaussian used for α and β.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sprs::{CsMat, TriMat};

use crate::error::{Error, Result};
use crate::linalg;

/// Second-order random walk on `T` equally spaced time points.
#[derive(Debug, Clone)]
pub struct Rw2Prior {
    len: usize,
    /// Unscaled `DᵀD` with `D` the `(T-2) × T` second-difference operator.
    pub structure: CsMat<f64>,
    /// Multiplier applied to `structure` so the geometric mean of the
    /// constrained marginal variances is one.
    pub scaling_factor: f64,
    log_pseudo_det: f64,
}

/// `DᵀD` for the `(T-2) × T` second-difference operator with rows `(1, -2, 1)`.
pub fn rw2_structure(t: usize) -> Result<CsMat<f64>> {
    if t < 3 {
        return Err(Error::InvalidParameter(format!("RW2 needs at least 3 time points, got {t}")));
    }
    let mut tri = TriMat::new((t, t));
    const ROW: [f64; 3] = [1.0, -2.0, 1.0];
    for r in 0..t - 2 {
        for a in 0..3 {
            for b in 0..3 {
                tri.add_triplet(r + a, r + b, ROW[a] * ROW[b]);
            }
        }
    }
    Ok(tri.to_csr())
}

/// Constant and linear sequences spanning the RW2 null space.
pub fn rw2_null_basis(t: usize) -> DMatrix<f64> {
    DMatrix::from_fn(t, 2, |i, j| if j == 0 { 1.0 } else { i as f64 + 1.0 })
}

impl Rw2Prior {
    pub fn new(t: usize) -> Result<Self> {
        let structure = rw2_structure(t)?;
        let dense = linalg::to_dense(&structure);
        let var = linalg::constrained_marginal_variances(&dense, &rw2_null_basis(t), &[0, 1])?;
        let scaling_factor = linalg::geometric_mean(&var);
        let log_pseudo_det = linalg::log_pseudo_det(&(dense * scaling_factor), 2)?;
        Ok(Self {
            len: t,
            structure,
            scaling_factor,
            log_pseudo_det,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn scaled_structure(&self) -> CsMat<f64> {
        self.structure.map(|v| v * self.scaling_factor)
    }

    pub fn scaled_dense(&self) -> DMatrix<f64> {
        linalg::to_dense(&self.structure) * self.scaling_factor
    }

    /// log pseudo-determinant of the scaled structure (rank `T-2`).
    pub fn log_pseudo_det(&self) -> f64 {
        self.log_pseudo_det
    }

    /// Log-density of κ (up to the flat null-space directions) for a given
    /// standard deviation.
    pub fn log_density(&self, kappa: &[f64], sigma: f64) -> f64 {
        let tau = 1.0 / (sigma * sigma);
        let rank = (self.len - 2) as f64;
        let q = quad_form(&self.structure, kappa) * self.scaling_factor;
        0.5 * rank * (tau.ln() - std::f64::consts::TAU.ln()) + 0.5 * self.log_pseudo_det - 0.5 * tau * q
    }
}

pub(crate) fn quad_form(m: &CsMat<f64>, x: &[f64]) -> f64 {
    m.iter().map(|(v, (i, j))| v * x[i] * x[j]).sum()
}

/// Prior threshold `P(σ > U) = α`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailSpec {
    pub u: f64,
    pub alpha: f64,
}

/// PC prior on a standard deviation: exponential with rate `-ln(α)/U`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PcPriorStdDev {
    pub u: f64,
    pub alpha: f64,
    pub rate: f64,
}

pub fn pc_prior_stddev(u: f64, alpha: f64) -> Result<PcPriorStdDev> {
    if !(u > 0.0 && u.is_finite()) {
        return Err(Error::InvalidParameter(format!("PC prior threshold U must be positive, got {u}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!("PC prior alpha must be in (0, 1), got {alpha}")));
    }
    Ok(PcPriorStdDev {
        u,
        alpha,
        rate: -alpha.ln() / u,
    })
}

impl PcPriorStdDev {
    pub fn log_density(&self, sigma: f64) -> f64 {
        if sigma <= 0.0 {
            return f64::NEG_INFINITY;
        }
        self.rate.ln() - self.rate * sigma
    }

    /// Density of `log σ`.
    pub fn log_density_log_scale(&self, log_sigma: f64) -> f64 {
        self.log_density(log_sigma.exp()) + log_sigma
    }

    /// `P(σ > s)`.
    pub fn survival(&self, sigma: f64) -> f64 {
        (-self.rate * sigma.max(0.0)).exp()
    }
}

/// Number of grid points used to tabulate the mixing prior.
const MIXING_GRID: usize = 1000;
/// Above this value the mixing prior is evaluated without the grid.
const EXACT_ABOVE: f64 = 0.9;

/// PC prior on the BYM2 mixing parameter `φ`, shrinking towards the
/// unstructured model `φ = 0`.
///
/// The distance to the base model is `d(φ) = sqrt(2·KLD(φ))` where, with
/// `γ` the eigenvalues of the generalised inverse of the scaled structure,
/// `2·KLD(φ) = Σ h(φ(γᵢ - 1))` and `h(x) = x - ln(1 + x)`. The rate is
/// fixed by `P(φ < U) = α`. The log-density is tabulated on a uniform grid
/// and interpolated linearly after removing its `-ln(1 - φ)` singularity.
#[derive(Debug, Clone)]
pub struct PcPriorMixing {
    pub u: f64,
    pub alpha: f64,
    /// Rate of the exponential prior on the distance scale.
    pub rate: f64,
    gammas: Vec<f64>,
    /// `log p(φ) + ln(1 - φ)` on the grid.
    grid_log_density: Vec<f64>,
    /// Degenerate case (every eigenvalue equals one): `φ` does not change
    /// the model, and the prior is uniform.
    flat: bool,
}

fn kld_term(x: f64, one_plus_x: f64) -> f64 {
    if x.abs() < 1e-4 {
        x * x * (0.5 - x / 3.0 + x * x / 4.0 - x * x * x / 5.0)
    } else {
        x - one_plus_x.ln()
    }
}

pub fn pc_prior_mixing(u: f64, alpha: f64, generalized_inverse_eigenvalues: &[f64]) -> Result<PcPriorMixing> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::InvalidParameter(format!("mixing PC prior threshold must be in (0, 1), got {u}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!("mixing PC prior alpha must be in (0, 1), got {alpha}")));
    }
    let gammas = generalized_inverse_eigenvalues.to_vec();
    let flat = gammas.iter().all(|g| (g - 1.0).abs() < 1e-12);
    let mut prior = PcPriorMixing {
        u,
        alpha,
        rate: 0.0,
        gammas,
        grid_log_density: Vec::new(),
        flat,
    };
    if flat {
        return Ok(prior);
    }
    prior.rate = -(1.0 - alpha).ln() / prior.distance(u, 1.0 - u);
    prior.grid_log_density = (0..MIXING_GRID)
        .map(|j| {
            let phi = j as f64 / (MIXING_GRID - 1) as f64;
            prior.log_density_exact(phi, 1.0 - phi) + (1.0 - phi).ln()
        })
        .collect();
    Ok(prior)
}

impl PcPriorMixing {
    fn two_kld(&self, phi: f64, one_minus_phi: f64) -> f64 {
        self.gammas
            .iter()
            .map(|&g| kld_term(phi * (g - 1.0), one_minus_phi + phi * g))
            .sum()
    }

    fn distance(&self, phi: f64, one_minus_phi: f64) -> f64 {
        self.two_kld(phi, one_minus_phi).max(0.0).sqrt()
    }

    /// Exact log-density; `one_minus_phi` is passed separately to keep
    /// precision close to `φ = 1`.
    fn log_density_exact(&self, phi: f64, one_minus_phi: f64) -> f64 {
        if self.flat {
            return 0.0;
        }
        let d = self.distance(phi, one_minus_phi);
        let slope = if phi == 0.0 {
            (self.gammas.iter().map(|g| (g - 1.0) * (g - 1.0)).sum::<f64>() / 2.0).sqrt()
        } else {
            let num: f64 = self
                .gammas
                .iter()
                .map(|&g| phi * (g - 1.0) * (g - 1.0) / (one_minus_phi + phi * g))
                .sum();
            num / (2.0 * d)
        };
        self.rate.ln() - self.rate * d + slope.ln()
    }

    /// Log-density of `φ` on `[0, 1)`.
    pub fn log_density(&self, phi: f64) -> f64 {
        if !(0.0..1.0).contains(&phi) {
            return f64::NEG_INFINITY;
        }
        if self.flat {
            return 0.0;
        }
        let h = 1.0 / (MIXING_GRID - 1) as f64;
        let pos = phi / h;
        let j = pos.floor() as usize;
        if phi >= EXACT_ABOVE {
            // the log-density is strongly curved close to φ = 1
            return self.log_density_exact(phi, 1.0 - phi);
        }
        let w = pos - j as f64;
        (1.0 - w) * self.grid_log_density[j] + w * self.grid_log_density[j + 1] - (1.0 - phi).ln()
    }

    /// Density of `logit φ`.
    pub fn log_density_logit(&self, logit: f64) -> f64 {
        let phi = sigmoid(logit);
        let one_minus = sigmoid(-logit);
        let base = if phi < EXACT_ABOVE {
            self.log_density(phi)
        } else {
            self.log_density_exact(phi, one_minus)
        };
        base + phi.ln() + one_minus.ln()
    }

    /// `P(φ < p)`.
    pub fn cdf(&self, phi: f64) -> f64 {
        if self.flat {
            return phi.clamp(0.0, 1.0);
        }
        1.0 - (-self.rate * self.distance(phi, 1.0 - phi)).exp()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Zero-mean Gaussian with a fixed, large variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WideGaussianPrior {
    pub variance: f64,
}

impl WideGaussianPrior {
    pub fn new(variance: f64) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(Error::InvalidParameter(format!("wide prior variance must be positive, got {variance}")));
        }
        Ok(Self { variance })
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let n = x.len() as f64;
        -0.5 * n * (std::f64::consts::TAU * self.variance).ln() - x.iter().map(|v| v * v).sum::<f64>() / (2.0 * self.variance)
    }
}

/// Either kind of PC prior behind one interface.
#[derive(Debug, Clone)]
pub enum PcPrior {
    StdDev(PcPriorStdDev),
    Mixing(PcPriorMixing),
}

impl PcPrior {
    /// Log-density on the natural scale (σ or φ).
    pub fn log_density(&self, value: f64) -> f64 {
        match self {
            PcPrior::StdDev(p) => p.log_density(value),
            PcPrior::Mixing(p) => p.log_density(value),
        }
    }

    /// Log-density on the unconstrained scale (log σ or logit φ).
    pub fn log_density_internal(&self, internal: f64) -> f64 {
        match self {
            PcPrior::StdDev(p) => p.log_density_log_scale(internal),
            PcPrior::Mixing(p) => p.log_density_logit(internal),
        }
    }
}

/// All prior hyper-hyperparameters, with conventional defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSettings {
    pub sigma_z: TailSpec,
    pub sigma_kappa: TailSpec,
    pub sigma_omega: TailSpec,
    /// `P(φ < U) = α` for the mixing parameter.
    pub phi: TailSpec,
    /// Variance of the Gaussian priors on α and β.
    pub wide_variance: f64,
}

impl Default for PriorSettings {
    fn default() -> Self {
        let sd = TailSpec { u: 1.0, alpha: 0.01 };
        Self {
            sigma_z: sd,
            sigma_kappa: sd,
            sigma_omega: sd,
            phi: TailSpec { u: 0.5, alpha: 2.0 / 3.0 },
            wide_variance: 100.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{SpatialGraph, SpatialStructure};

    #[test]
    fn rw2_small_structure() {
        let s = linalg::to_dense(&rw2_structure(3).unwrap());
        assert_eq!(s, DMatrix::from_row_slice(3, 3, &[1.0, -2.0, 1.0, -2.0, 4.0, -2.0, 1.0, -2.0, 1.0]));
        assert!(rw2_structure(2).is_err());
    }

    #[test]
    fn rw2_annihilates_affine_sequences() {
        for t in [3, 7, 18] {
            let s = linalg::to_dense(&rw2_structure(t).unwrap());
            let ones = nalgebra::DVector::from_element(t, 1.0);
            let lin = nalgebra::DVector::from_fn(t, |i, _| i as f64 + 1.0);
            assert_eq!((&s * ones).amax(), 0.0);
            assert_eq!((&s * lin).amax(), 0.0);
        }
    }

    #[test]
    fn rw2_rank() {
        let s = linalg::to_dense(&rw2_structure(18).unwrap());
        let ev = nalgebra::SymmetricEigen::new(s).eigenvalues;
        let rank = ev.iter().filter(|e| e.abs() > 1e-9).count();
        assert_eq!(rank, 16);
    }

    #[test]
    fn stddev_rates() {
        let p = pc_prior_stddev(1.0, 0.01).unwrap();
        assert!((p.rate - 4.605170185988091).abs() < 1e-12);
        assert!((p.survival(1.0) - 0.01).abs() < 1e-15);
        let p = pc_prior_stddev(0.5, 0.5).unwrap();
        assert!((p.rate - 1.3862943611198906).abs() < 1e-12);
        assert!((p.log_density(0.3) - (p.rate.ln() - p.rate * 0.3)).abs() == 0.0);
        assert!(pc_prior_stddev(0.0, 0.5).is_err());
        assert!(pc_prior_stddev(1.0, 1.0).is_err());
    }

    fn mixing_for_ring(n: usize) -> PcPriorMixing {
        let s = SpatialStructure::new(&SpatialGraph::ring(n).unwrap()).unwrap();
        pc_prior_mixing(0.5, 2.0 / 3.0, &s.generalized_inverse_eigenvalues).unwrap()
    }

    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let n = n + n % 2;
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    #[test]
    fn mixing_prior_lower_tail_matches_alpha() {
        let p = mixing_for_ring(8);
        let mass = simpson(|x| p.log_density(x).exp(), 0.0, 0.5, 20_000);
        assert!((mass - 2.0 / 3.0).abs() < 1e-4, "mass {mass}");
        assert!((p.cdf(0.5) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn mixing_prior_normalised() {
        let p = mixing_for_ring(8);
        let last = 1.0 - 1.0 / (MIXING_GRID - 1) as f64;
        let body = simpson(|x| p.log_density(x).exp(), 0.0, last, 200_000);
        // tail in L = -ln(1 - φ), where the density is smooth and decays
        let l0 = -(1.0 - last).ln();
        let tail = simpson(
            |l| {
                let om = (-l).exp();
                (p.log_density_exact(1.0 - om, om) - l).exp()
            },
            l0,
            700.0,
            400_000,
        );
        assert!((body + tail - 1.0).abs() < 1e-6, "total {}", body + tail);
    }

    #[test]
    fn mixing_density_finite_positive_inside() {
        let p = mixing_for_ring(6);
        for i in 1..200 {
            let phi = i as f64 / 200.0;
            let ld = p.log_density(phi);
            assert!(ld.is_finite(), "phi {phi}");
        }
        assert!(pc_prior_mixing(1.0, 0.5, &[0.0, 1.0]).is_err());
    }

    #[test]
    fn interpolation_close_to_exact() {
        let p = mixing_for_ring(10);
        for i in 1..97 {
            let phi = i as f64 / 97.0;
            assert!((p.log_density(phi) - p.log_density_exact(phi, 1.0 - phi)).abs() < 1e-4);
        }
    }

    #[test]
    fn logit_density_includes_jacobian() {
        let p = mixing_for_ring(5);
        let x = 0.3f64;
        let phi = sigmoid(x);
        let expect = p.log_density(phi) + (phi * (1.0 - phi)).ln();
        assert!((p.log_density_logit(x) - expect).abs() < 1e-12);
    }
}
