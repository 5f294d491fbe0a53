//! Synthetic datasets drawn from the generative model.

use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::data::{default_age_grouping, parse_adjacency, period_mapping, AgeGrouping, MortalityDataset};
use crate::error::{Error, Result};
use crate::graph::{SpatialGraph, SpatialStructure};
use crate::linalg;
use crate::model::{Hyperparameters, LatentField};
use crate::priors::{rw2_null_basis, Rw2Prior};

/// Largest expected count accepted by the simulator.
pub const MAX_EXPECTED_COUNT: f64 = 1e9;

#[derive(Debug, Clone, PartialEq)]
pub enum GraphSource {
    Ring(usize),
    Grid(usize, usize),
    /// Adjacency file; area identifiers are taken from the file.
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub enum LatentSource {
    /// `κ`, `ω` and `z` from their priors; `α` from [`demographic_profile`]
    /// and `β` a positive random profile rescaled to sum to one.
    Prior,
    /// `α`, `β` and `κ` given; `ω` and `z` from their priors.
    Supplied { alpha: Vec<f64>, beta: Vec<f64>, kappa: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CountMode {
    Poisson,
    /// Deaths set to the expected count rounded to the nearest integer.
    Expected,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub first_age: u32,
    pub n_ages: usize,
    pub first_year: i32,
    pub n_years: usize,
    pub graph: GraphSource,
    pub age_grouping: Option<AgeGrouping>,
    pub cut_year: Option<i32>,
    /// True hyperparameters; standard deviations may be zero.
    pub hyper: Hyperparameters,
    pub latent: LatentSource,
    /// Person-years per cell.
    pub exposure: f64,
    pub count_mode: CountMode,
    pub seed: u64,
}

impl SimulationConfig {
    pub fn new(n_ages: usize, n_years: usize, graph: GraphSource) -> Self {
        Self {
            first_age: 0,
            n_ages,
            first_year: 2002,
            n_years,
            graph,
            age_grouping: None,
            cut_year: None,
            hyper: Hyperparameters {
                sigma_z: 0.05,
                sigma_kappa: 0.1,
                sigma_omega: vec![0.2],
                phi: vec![0.5],
            },
            latent: LatentSource::Prior,
            exposure: 1e5,
            count_mode: CountMode::Poisson,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub data: MortalityDataset,
    pub truth: LatentField,
    pub graph: SpatialGraph,
    pub age_grouping: AgeGrouping,
    pub hyper: Hyperparameters,
}

pub fn ring_graph(n: usize) -> Result<SpatialGraph> {
    SpatialGraph::ring(n)
}

pub fn grid_graph(rows: usize, cols: usize) -> Result<SpatialGraph> {
    SpatialGraph::grid(rows, cols)
}

/// Zero-padded area identifiers `A1..An`.
pub fn area_ids(n: usize) -> Vec<String> {
    let width = n.to_string().len();
    (1..=n).map(|i| format!("A{i:0width$}")).collect()
}

/// Plausible single-year `(α, β, κ)`: a log-rate curve with infant
/// mortality and Gompertz slope, a positive `β` profile summing to one and
/// a linear decline of `κ` from `+trend` to `-trend`.
pub fn demographic_profile(ages: &[u32], n_years: usize, trend: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let alpha: Vec<f64> = ages
        .iter()
        .map(|&x| {
            let x = x as f64;
            (2e-4 + 3e-3 * (-1.5 * x).exp() + 3e-5 * (0.095 * x).exp()).ln()
        })
        .collect();
    let raw: Vec<f64> = ages
        .iter()
        .map(|&x| {
            let x = x as f64;
            0.4 + (-((x - 60.0) / 35.0).powi(2)).exp() + 0.5 * (-x / 8.0).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    let beta = raw.iter().map(|b| b / total).collect();
    let kappa = if n_years > 1 {
        (0..n_years)
            .map(|t| trend * (1.0 - 2.0 * t as f64 / (n_years - 1) as f64))
            .collect()
    } else {
        vec![0.0]
    };
    (alpha, beta, kappa)
}

fn load_graph(source: &GraphSource) -> Result<(SpatialGraph, Vec<String>)> {
    match source {
        GraphSource::Ring(n) => Ok((ring_graph(*n)?, area_ids(*n))),
        GraphSource::Grid(r, c) => Ok((grid_graph(*r, *c)?, area_ids(r * c))),
        GraphSource::File(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let mut areas: Vec<String> = text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .filter_map(|l| l.split_once(':').map(|(id, _)| id.trim().to_string()))
                .collect();
            areas.sort();
            areas.dedup();
            Ok((parse_adjacency(&text, &areas)?, areas))
        }
    }
}

fn normals<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// BYM2 draw `ω = σ(√(1-φ)·v + √φ·u)` with `u` from the scaled Besag prior
/// and `v` iid, both centred on every connected component. Returns `(ω, u)`.
pub fn sample_bym2<R: Rng>(structure: &SpatialStructure, sigma: f64, phi: f64, rng: &mut R) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = structure.n_areas();
    let comps = &structure.plan.components;
    let basis = DMatrix::from_fn(n, comps.len(), |i, c| if comps[c].contains(&i) { 1.0 } else { 0.0 });
    let u = if comps.is_empty() {
        DVector::from_vec(normals(rng, n))
    } else {
        linalg::sample_intrinsic(&structure.structure.to_dense(), &basis, rng)?
    };
    let mut v = normals(rng, n);
    for comp in comps {
        let m = comp.iter().map(|&i| v[i]).sum::<f64>() / comp.len() as f64;
        for &i in comp {
            v[i] -= m;
        }
    }
    let omega = (0..n)
        .map(|i| sigma * ((1.0 - phi).sqrt() * v[i] + phi.sqrt() * u[i]))
        .collect();
    Ok((omega, u.iter().copied().collect()))
}

/// RW2 draw with the constant and linear directions removed.
pub fn sample_rw2<R: Rng>(n_years: usize, sigma: f64, rng: &mut R) -> Result<Vec<f64>> {
    let rw2 = Rw2Prior::new(n_years)?;
    let x = linalg::sample_intrinsic(&rw2.scaled_dense(), &rw2_null_basis(n_years), rng)?;
    Ok(x.iter().map(|v| v * sigma).collect())
}

fn check_hyper(h: &Hyperparameters, n_groups: usize) -> Result<()> {
    let sds = [h.sigma_z, h.sigma_kappa];
    if sds.iter().chain(&h.sigma_omega).any(|s| !(*s >= 0.0 && s.is_finite())) {
        return Err(Error::InvalidParameter("simulation standard deviations must be finite and >= 0".into()));
    }
    if h.phi.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::InvalidParameter("phi must lie in [0, 1]".into()));
    }
    for v in [&h.sigma_omega, &h.phi] {
        if v.is_empty() || (v.len() != 1 && v.len() != n_groups) {
            return Err(Error::InvalidParameter(format!(
                "spatial hyperparameters need 1 or {n_groups} entries, got {}",
                v.len()
            )));
        }
    }
    Ok(())
}

pub fn simulate(config: &SimulationConfig) -> Result<Simulation> {
    if config.n_ages == 0 || config.n_years == 0 {
        return Err(Error::InvalidParameter("dimensions must be at least 1".into()));
    }
    if !(config.exposure > 0.0 && config.exposure.is_finite()) {
        return Err(Error::InvalidParameter("exposure must be positive".into()));
    }
    let (graph, areas) = load_graph(&config.graph)?;
    let ages: Vec<u32> = (0..config.n_ages as u32).map(|a| config.first_age + a).collect();
    let years: Vec<i32> = (0..config.n_years as i32).map(|t| config.first_year + t).collect();
    let grouping = match &config.age_grouping {
        Some(g) => {
            if g.n_ages() != config.n_ages {
                return Err(Error::InvalidParameter("age grouping does not match the number of ages".into()));
            }
            g.clone()
        }
        None => default_age_grouping(&ages)?,
    };
    let periods = period_mapping(&years, config.cut_year)?;
    let (na, nt, ns) = (config.n_ages, config.n_years, graph.n_areas());
    let (ng, np) = (grouping.group_count(), periods.period_count());
    check_hyper(&config.hyper, ng)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut truth = LatentField::zeros(na, nt, ns, ng, np);

    match &config.latent {
        LatentSource::Supplied { alpha, beta, kappa } => {
            if alpha.len() != na || beta.len() != na || kappa.len() != nt {
                return Err(Error::InvalidParameter("supplied alpha/beta/kappa have the wrong lengths".into()));
            }
            truth.alpha = alpha.clone();
            truth.beta = beta.clone();
            truth.kappa = kappa.clone();
        }
        LatentSource::Prior => {
            let (alpha, _, _) = demographic_profile(&ages, nt, 0.0);
            truth.alpha = alpha;
            let raw: Vec<f64> = (0..na)
                .map(|_| (1.0 + 0.3 * rng.sample::<f64, _>(StandardNormal)).abs())
                .collect();
            let total: f64 = raw.iter().sum();
            truth.beta = raw.iter().map(|b| b / total).collect();
            truth.kappa = if nt >= 3 {
                sample_rw2(nt, config.hyper.sigma_kappa, &mut rng)?
            } else {
                vec![0.0; nt]
            };
        }
    }

    let structure = SpatialStructure::new(&graph)?;
    for g in 0..ng {
        for p in 0..np {
            let (omega, u) = sample_bym2(
                &structure,
                config.hyper.sigma_omega_for(g),
                config.hyper.phi_for(g),
                &mut rng,
            )?;
            let k = g * np + p;
            truth.omega[k * ns..(k + 1) * ns].copy_from_slice(&omega);
            truth.u[k * ns..(k + 1) * ns].copy_from_slice(&u);
        }
    }
    for z in truth.z.iter_mut() {
        *z = config.hyper.sigma_z * rng.sample::<f64, _>(StandardNormal);
    }

    let mut deaths = Vec::with_capacity(na * nt * ns);
    let exposures = vec![config.exposure; na * nt * ns];
    for a in 0..na {
        let g = grouping.group_of(a);
        for t in 0..nt {
            let p = periods.period_of(t);
            for s in 0..ns {
                let eta = truth.alpha[a] + truth.beta[a] * truth.kappa[t] + truth.omega_at(s, g, p) + truth.z[(a * nt + t) * ns + s];
                let mu = config.exposure * eta.exp();
                if !(mu <= MAX_EXPECTED_COUNT) {
                    return Err(Error::InvalidParameter(format!(
                        "expected count {mu:.3e} exceeds {MAX_EXPECTED_COUNT:e}; use smaller exposures"
                    )));
                }
                let y = match config.count_mode {
                    CountMode::Expected => mu.round() as u64,
                    CountMode::Poisson => {
                        if mu > 0.0 {
                            Poisson::new(mu).map_err(|e| Error::Numerical(e.to_string()))?.sample(&mut rng) as u64
                        } else {
                            0
                        }
                    }
                };
                deaths.push(y);
            }
        }
    }
    let data = MortalityDataset::new(ages, years, areas, deaths, exposures)?;
    Ok(Simulation {
        data,
        truth,
        graph,
        age_grouping: grouping,
        hyper: config.hyper.clone(),
    })
}

/// Write the ground truth as `block,index1,index2,index3,value` rows.
pub fn write_truth(path: &Path, truth: &LatentField, hyper: &Hyperparameters) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    let io = |e| Error::io(path, e);
    writeln!(w, "block,index1,index2,index3,value").map_err(io)?;
    for (i, v) in truth.alpha.iter().enumerate() {
        writeln!(w, "alpha,{i},,,{v}").map_err(io)?;
    }
    for (i, v) in truth.beta.iter().enumerate() {
        writeln!(w, "beta,{i},,,{v}").map_err(io)?;
    }
    for (i, v) in truth.kappa.iter().enumerate() {
        writeln!(w, "kappa,{i},,,{v}").map_err(io)?;
    }
    let (ns, np) = (truth.n_areas, truth.n_periods);
    for (block, vals) in [("omega", &truth.omega), ("u", &truth.u)] {
        for (idx, v) in vals.iter().enumerate() {
            let (k, s) = (idx / ns, idx % ns);
            writeln!(w, "{block},{s},{},{},{v}", k / np, k % np).map_err(io)?;
        }
    }
    let nt = truth.kappa.len();
    for (idx, v) in truth.z.iter().enumerate() {
        let (a, t, s) = (idx / (nt * ns), (idx / ns) % nt, idx % ns);
        writeln!(w, "z,{a},{t},{s},{v}").map_err(io)?;
    }
    writeln!(w, "sigma_z,,,,{}", hyper.sigma_z).map_err(io)?;
    writeln!(w, "sigma_kappa,,,,{}", hyper.sigma_kappa).map_err(io)?;
    for (g, v) in hyper.sigma_omega.iter().enumerate() {
        writeln!(w, "sigma_omega,{g},,,{v}").map_err(io)?;
    }
    for (g, v) in hyper.phi.iter().enumerate() {
        writeln!(w, "phi,{g},,,{v}").map_err(io)?;
    }
    w.flush().map_err(io)
}
