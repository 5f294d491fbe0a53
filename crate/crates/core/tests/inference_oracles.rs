mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spatial_lc::data::{default_age_grouping, period_mapping, AgeGrouping, MortalityDataset};
use spatial_lc::graph::SpatialGraph;
use spatial_lc::inference::fit::{fit, FitResult, FitSettings};
use spatial_lc::inference::inner::{inner_fit, InnerSettings};
use spatial_lc::inference::laplace::{evaluate_internal, marginal_log_posterior};
use spatial_lc::inference::optimize::{optimize_hyper, OptimizerSettings};
use spatial_lc::model::{Family, Hyperparameters, LatentBlocks, Model, ModelSpec, Variant};
use spatial_lc::simulate::{demographic_profile, simulate, CountMode, GraphSource, LatentSource, SimulationConfig};

fn crude_start(model: &Model, data: &MortalityDataset) -> Vec<f64> {
    let l = &model.layout;
    let mut x = vec![0.0; model.dim()];
    let (d, e) = data.aggregate_over_areas();
    let nt = data.n_years();
    for a in 0..l.alpha.len() {
        let (sd, se): (f64, f64) = (0..nt).fold((0.0, 0.0), |(p, q), t| (p + d[a * nt + t], q + e[a * nt + t]));
        x[l.alpha.start + a] = (sd.max(0.5) / se).ln();
    }
    for j in l.beta.clone() {
        x[j] = 1.0 / l.beta.len() as f64;
    }
    x
}

fn with_blocks(data: &MortalityDataset, graph: &SpatialGraph, blocks: LatentBlocks, family: Family) -> Model {
    let mut spec = ModelSpec::new(
        Variant::Static,
        default_age_grouping(data.ages()).unwrap(),
        period_mapping(data.years(), None).unwrap(),
    )
    .unwrap();
    spec.blocks = blocks;
    spec.family = family;
    Model::new(data, graph, spec).unwrap()
}

#[test]
fn inner_mode_matches_dense_full_newton() {
    let g = pair_graph();
    let data = lee_carter_data(3, 3, &g, 5000.0, 21);
    let model = static_model(&data, &g);
    for h in [hyper(0.1, 0.3, 0.3, 0.5, 1), hyper(0.02, 1.0, 0.05, 0.9, 1)] {
        let approx = inner_fit(&model, &h, None, &InnerSettings::default()).unwrap();
        assert!(approx.converged);
        let oracle = DenseOracle::new(&model, &data, &g, &h);
        let mode = oracle.newton_mode(&crude_start(&model, &data));
        let diff = max_abs_diff(&approx.mode, mode.as_slice());
        assert!(diff < 1e-5, "max coordinate difference {diff}");
        assert!(approx.projected_gradient_norm < 1e-5);
        let (_, nb) = oracle.subspace();
        let pg = (nb.transpose() * oracle.gradient(&approx.mode)).norm();
        assert!(pg < 1e-5, "projected gradient {pg}");
        assert!((&oracle.a * DVector::from_column_slice(&approx.mode) - &oracle.e).amax() < 1e-8);
    }
}

#[test]
fn laplace_is_exact_for_gaussian_likelihood() {
    let g = SpatialGraph::ring(4).unwrap();
    let data = lee_carter_data(3, 2, &g, 3000.0, 5);
    let blocks = LatentBlocks {
        alpha: true,
        lee_carter: false,
        spatial: true,
        overdispersion: true,
    };
    let sd = 0.2;
    let model = with_blocks(&data, &g, blocks, Family::Gaussian { sd });
    for h in [hyper(0.1, 0.1, 0.3, 0.4, 1), hyper(0.5, 0.1, 1.2, 0.95, 1)] {
        let got = marginal_log_posterior(&model, &h, None, &InnerSettings::default()).unwrap().value;

        let oracle = DenseOracle::new(&model, &data, &g, &h);
        let (_, nb) = oracle.subspace();
        let cov_w = (nb.transpose() * &oracle.q * &nb).try_inverse().unwrap();
        let cov_x = &nb * cov_w * nb.transpose();
        let n = data.n_cells();
        let l = &model.layout;
        let mut xmat = DMatrix::zeros(n, model.dim());
        let mut y = DVector::zeros(n);
        for c in 0..n {
            let (a, _t, s) = data.cell_position(c);
            xmat[(c, l.alpha.start + a)] = 1.0;
            xmat[(c, l.omega_index(s, model.spec.age_grouping.group_of(a), 0))] = 1.0;
            xmat[(c, l.z.start + c)] = 1.0;
            y[c] = (data.deaths()[c] as f64 / data.exposures()[c]).ln();
        }
        let s = &xmat * cov_x * xmat.transpose() + DMatrix::identity(n, n) * (sd * sd);
        let chol = s.cholesky().unwrap();
        let logdet: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        let quad = y.dot(&chol.solve(&y));
        let theta = model.hyper_to_internal(&h);
        let want = -0.5 * (n as f64 * LN_2PI + logdet + quad) + model.log_hyperprior(&theta);
        assert!((got - want).abs() < 1e-8, "{got} vs {want}");
    }
}

fn log_quadrature(y: f64, e: f64, sigma: f64) -> f64 {
    let ln_fact = statrs::function::factorial::ln_factorial(y as u64);
    let logf = |z: f64| y * z + y * e.ln() - e * z.exp() - ln_fact - 0.5 * z * z / (sigma * sigma) - 0.5 * (LN_2PI + 2.0 * sigma.ln());
    // Newton for the integrand's peak, then Simpson over ±15 curvature sd
    let mut m = (y / e).ln();
    for _ in 0..50 {
        let g = y - e * m.exp() - m / (sigma * sigma);
        let h = e * m.exp() + 1.0 / (sigma * sigma);
        m += g / h;
    }
    let sd = 1.0 / (e * m.exp() + 1.0 / (sigma * sigma)).sqrt();
    let peak = logf(m);
    let n = 20000;
    let (lo, hi) = (m - 15.0 * sd, m + 15.0 * sd);
    let h = (hi - lo) / n as f64;
    let mut acc = 0.0;
    for i in 0..=n {
        let w = if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        acc += w * (logf(lo + i as f64 * h) - peak).exp();
    }
    peak + (acc * h / 3.0).ln()
}

#[test]
fn laplace_matches_quadrature_for_two_overdispersed_cells() {
    let e = 1e6;
    let deaths = vec![100_000u64, 80_000];
    let data = MortalityDataset::new(vec![60], vec![2000], vec!["A".into(), "B".into()], deaths.clone(), vec![e, e]).unwrap();
    let blocks = LatentBlocks {
        alpha: false,
        lee_carter: false,
        spatial: false,
        overdispersion: true,
    };
    let model = with_blocks(&data, &pair_graph(), blocks, Family::Poisson);
    assert_eq!(model.dim(), 2);
    for sigma in [0.3, 1.5] {
        let h = hyper(sigma, 0.1, 0.1, 0.5, 1);
        let got = marginal_log_posterior(&model, &h, None, &InnerSettings::default()).unwrap().value;
        let theta = model.hyper_to_internal(&h);
        let want = deaths.iter().map(|&y| log_quadrature(y as f64, e, sigma)).sum::<f64>() + model.log_hyperprior(&theta);
        assert!((got - want).abs() < 1e-4, "{got} vs {want}");
    }
}

#[test]
fn marginal_does_not_depend_on_the_starting_point() {
    let g = SpatialGraph::ring(3).unwrap();
    let data = lee_carter_data(4, 4, &g, 3000.0, 8);
    let model = static_model(&data, &g);
    let h = hyper(0.05, 0.2, 0.2, 0.5, 1);
    let settings = InnerSettings::default();
    let base = marginal_log_posterior(&model, &h, None, &settings).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..2 {
        let start: Vec<f64> = base.approx.mode.iter().map(|m| m + rng.random_range(-0.2..0.2)).collect();
        let other = marginal_log_posterior(&model, &h, Some(&start), &settings).unwrap();
        assert!((other.value - base.value).abs() < 1e-6, "{} vs {}", other.value, base.value);
    }
}

#[test]
fn one_dimensional_optimum_matches_grid_search() {
    let g = SpatialGraph::ring(3).unwrap();
    let data = lee_carter_data(4, 5, &g, 2000.0, 12);
    let model = static_model(&data, &g);
    let init = model.hyper_to_internal(&hyper(0.1, 0.3, 0.2, 0.5, 1));
    let idx = model.hyper_layout.sigma_omega.start;
    let settings = OptimizerSettings {
        free: Some(vec![idx]),
        tolerance: 1e-5,
        ..OptimizerSettings::default()
    };
    let inner = InnerSettings::default();
    let opt = optimize_hyper(&model, &init, &settings, &inner).unwrap();
    let mut best = (f64::NEG_INFINITY, 0.0);
    let mut theta = init.clone();
    let mut v = opt.theta[idx] - 0.5;
    while v <= opt.theta[idx] + 0.5 {
        theta[idx] = v;
        let f = evaluate_internal(&model, &theta, None, &inner).unwrap().value;
        if f > best.0 {
            best = (f, v);
        }
        v += 0.01;
    }
    assert!((best.1 - opt.theta[idx]).abs() <= 0.01 + 1e-9, "grid {} vs optimiser {}", best.1, opt.theta[idx]);
    assert!(opt.value >= best.0 - 1e-6);
    for (i, (&a, &b)) in opt.theta.iter().zip(&init).enumerate() {
        if i != idx {
            assert_eq!(a, b);
        }
    }
}

fn fixed_fit(data: &MortalityDataset, graph: &SpatialGraph, h: &Hyperparameters) -> FitResult {
    let model = static_model(data, graph);
    let settings = FitSettings {
        initial_hyper: Some(h.clone()),
        fixed_hyper: true,
        n_samples: 200,
        ..FitSettings::default()
    };
    fit(&model, &settings).unwrap()
}

#[test]
fn doubling_exposure_shrinks_every_sd() {
    let g = SpatialGraph::ring(3).unwrap();
    let data = lee_carter_data(4, 4, &g, 1500.0, 6);
    let doubled = MortalityDataset::new(
        data.ages().to_vec(),
        data.years().to_vec(),
        data.areas().to_vec(),
        data.deaths().iter().map(|d| 2 * d).collect(),
        data.exposures().iter().map(|e| 2.0 * e).collect(),
    )
    .unwrap();
    let h = hyper(0.05, 0.2, 0.2, 0.5, 1);
    let a = fixed_fit(&data, &g, &h);
    let b = fixed_fit(&doubled, &g, &h);
    let pairs = [(&a.alpha, &b.alpha), (&a.beta, &b.beta), (&a.kappa, &b.kappa), (&a.omega, &b.omega)];
    for (x, y) in pairs {
        for (s, t) in x.iter().zip(y.iter()) {
            assert!(t.sd < s.sd, "{} !< {}", t.sd, s.sd);
        }
    }
}

fn sim_config(n_ages: usize, n_years: usize, n_areas: usize, trend: f64) -> SimulationConfig {
    let mut cfg = SimulationConfig::new(n_ages, n_years, GraphSource::Ring(n_areas));
    cfg.first_age = 60;
    let ages: Vec<u32> = (60..60 + n_ages as u32).collect();
    let (alpha, beta, kappa) = demographic_profile(&ages, n_years, trend);
    cfg.latent = LatentSource::Supplied { alpha, beta, kappa };
    cfg
}

#[test]
fn flat_kappa_is_recovered_as_flat() {
    for seed in 1..=6 {
        let mut cfg = sim_config(8, 6, 4, 0.0);
        cfg.exposure = 2e4;
        cfg.seed = seed;
        let sim = simulate(&cfg).unwrap();
        assert!(sim.truth.kappa.iter().all(|&k| k == 0.0));
        let model = static_model(&sim.data, &sim.graph);
        let r = fit(&model, &FitSettings::default()).unwrap();
        for k in &r.kappa {
            assert!(k.mean.abs() < 3.0 * k.sd, "seed {seed}: {} vs sd {}", k.mean, k.sd);
        }
    }
}

#[test]
fn noiseless_refit_recovers_the_truth() {
    let mut cfg = sim_config(6, 5, 4, 1.0);
    cfg.exposure = 2e9;
    cfg.count_mode = CountMode::Expected;
    cfg.hyper = hyper(0.0, 0.1, 0.2, 0.5, 1);
    cfg.seed = 5;
    let sim = simulate(&cfg).unwrap();
    let h = hyper(1e-3, 0.1, 0.2, 0.5, 1);
    let r = fixed_fit(&sim.data, &sim.graph, &h);
    let t = &sim.truth;
    for (s, v) in r.beta.iter().zip(&t.beta) {
        assert!((s.mean - v).abs() < 1e-6, "beta {} vs {v}", s.mean);
    }
    for (s, v) in r.alpha.iter().zip(&t.alpha).chain(r.kappa.iter().zip(&t.kappa)).chain(r.omega.iter().zip(&t.omega)) {
        assert!((s.mean - v).abs() < 1e-3, "{} vs {v}", s.mean);
    }
}

#[test]
fn gender_labels_do_not_change_the_numbers() {
    let g = SpatialGraph::ring(3).unwrap();
    let males = lee_carter_data(3, 4, &g, 900.0, 1).with_label("male");
    let females = lee_carter_data(3, 4, &g, 1100.0, 2).with_label("female");
    let h = hyper(0.05, 0.2, 0.2, 0.5, 1);
    let a = fixed_fit(&males, &g, &h);
    let b = fixed_fit(&females, &g, &h);
    let mut a2 = fixed_fit(&males.clone().with_label("female"), &g, &h);
    let mut b2 = fixed_fit(&females.clone().with_label("male"), &g, &h);
    assert_eq!(a2.gender, "female");
    assert_eq!(b2.gender, "male");
    a2.gender = a.gender.clone();
    b2.gender = b.gender.clone();
    assert_eq!(a, a2);
    assert_eq!(b, b2);
}

#[test]
fn summaries_are_ordered_and_constrained() {
    let g = SpatialGraph::ring(4).unwrap();
    let data = lee_carter_data(12, 5, &g, 800.0, 31);
    let spec = ModelSpec::new(
        Variant::Period,
        AgeGrouping::from_groups(vec![0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1]).unwrap(),
        period_mapping(data.years(), Some(2002)).unwrap(),
    )
    .unwrap();
    let model = Model::new(&data, &g, spec).unwrap();
    let settings = FitSettings {
        initial_hyper: Some(Hyperparameters {
            sigma_z: 0.05,
            sigma_kappa: 0.3,
            sigma_omega: vec![0.2, 0.3],
            phi: vec![0.5, 0.7],
        }),
        fixed_hyper: true,
        ..FitSettings::default()
    };
    let r = fit(&model, &settings).unwrap();
    let all = r.alpha.iter().chain(&r.beta).chain(&r.kappa).chain(&r.omega).chain(&r.beta_kappa);
    for s in all {
        assert!(s.q025 <= s.q50 && s.q50 <= s.q975 && s.sd >= 0.0);
    }
    assert!((r.beta.iter().map(|s| s.mean).sum::<f64>() - 1.0).abs() < 1e-8);
    assert!(r.kappa.iter().map(|s| s.mean).sum::<f64>().abs() < 1e-8);
    for g in 0..2 {
        for p in 0..2 {
            let s: f64 = (0..4).map(|a| r.omega_at(a, g, p).mean).sum();
            assert!(s.abs() < 1e-8);
        }
    }
}
