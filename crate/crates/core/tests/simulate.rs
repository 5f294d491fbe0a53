use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spatial_lc::data::period_mapping;
use spatial_lc::graph::SpatialStructure;
use spatial_lc::model::{build_constraints, ModelSpec, Variant};
use spatial_lc::simulate::{
    grid_graph, ring_graph, sample_bym2, simulate, CountMode, GraphSource, LatentSource, SimulationConfig,
};

fn flat_config(n_ages: usize, exposure: f64) -> SimulationConfig {
    let mut cfg = SimulationConfig::new(n_ages, 3, GraphSource::Ring(3));
    cfg.hyper.sigma_z = 0.0;
    cfg.hyper.sigma_omega = vec![0.0];
    cfg.latent = LatentSource::Supplied {
        alpha: (0..n_ages).map(|a| -6.0 + 0.5 * a as f64).collect(),
        beta: vec![1.0 / n_ages as f64; n_ages],
        kappa: vec![0.0; 3],
    };
    cfg.exposure = exposure;
    cfg
}

#[test]
fn empirical_rates_converge_to_exp_alpha() {
    let cfg = flat_config(4, 1e7);
    let sim = simulate(&cfg).unwrap();
    let d = &sim.data;
    for a in 0..4 {
        let mut deaths = 0.0;
        let mut exposure = 0.0;
        for t in 0..d.n_years() {
            for s in 0..d.n_areas() {
                deaths += d.deaths_at(a, t, s) as f64;
                exposure += d.exposure_at(a, t, s);
            }
        }
        let want = sim.truth.alpha[a].exp();
        assert!((deaths / exposure / want - 1.0).abs() < 0.01);
    }
}

#[test]
fn one_cell_mean_matches_expected_count() {
    let mut cfg = SimulationConfig::new(1, 3, GraphSource::Grid(1, 1));
    cfg.hyper.sigma_z = 0.0;
    cfg.hyper.sigma_omega = vec![0.0];
    cfg.latent = LatentSource::Supplied {
        alpha: vec![-5.0],
        beta: vec![1.0],
        kappa: vec![0.0; 3],
    };
    cfg.exposure = 2000.0;
    let n = 10_000;
    let mut total = 0.0;
    for r in 0..n {
        cfg.seed = 1000 + r as u64;
        total += simulate(&cfg).unwrap().data.deaths_at(0, 0, 0) as f64;
    }
    let lambda = 2000.0 * (-5.0f64).exp();
    let mean = total / n as f64;
    assert!((mean - lambda).abs() < 3.0 * (lambda / n as f64).sqrt(), "{mean} vs {lambda}");
}

#[test]
fn same_seed_same_data() {
    let cfg = SimulationConfig::new(5, 4, GraphSource::Grid(2, 3));
    let a = simulate(&cfg).unwrap();
    let b = simulate(&cfg).unwrap();
    assert_eq!(a.data, b.data);
    assert_eq!(a.truth, b.truth);
    let c = simulate(&SimulationConfig { seed: 2, ..cfg }).unwrap();
    assert_ne!(a.data.deaths(), c.data.deaths());
}

#[test]
fn truth_satisfies_every_constraint() {
    for variant in [Variant::Static, Variant::Period] {
        let mut cfg = SimulationConfig::new(25, 6, GraphSource::Grid(2, 3));
        cfg.first_age = 50;
        cfg.seed = 8;
        if variant == Variant::Period {
            cfg.cut_year = Some(2004);
        }
        let sim = simulate(&cfg).unwrap();
        let years = sim.data.years().to_vec();
        let spec = ModelSpec::new(variant, sim.age_grouping.clone(), period_mapping(&years, cfg.cut_year).unwrap()).unwrap();
        let cons = build_constraints(&spec, &sim.graph);
        let mut x = Vec::new();
        x.extend(&sim.truth.alpha);
        x.extend(&sim.truth.beta);
        x.extend(&sim.truth.kappa);
        let s = sim.graph.n_areas();
        for k in 0..sim.truth.omega.len() / s {
            x.extend(&sim.truth.omega[k * s..(k + 1) * s]);
            x.extend(&sim.truth.u[k * s..(k + 1) * s]);
        }
        assert!(cons.max_violation(&x) < 1e-10, "{variant:?}");
    }
}

#[test]
fn bym2_draw_with_phi_one_sums_to_zero() {
    let st = SpatialStructure::new(&ring_graph(6).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let (omega, u) = sample_bym2(&st, 0.7, 1.0, &mut rng).unwrap();
        assert!(u.iter().sum::<f64>().abs() < 1e-10);
        assert!(omega.iter().sum::<f64>().abs() < 1e-10);
    }
}

#[test]
fn graph_sizes() {
    let tri = ring_graph(3).unwrap();
    assert!((0..3).all(|i| tri.degree(i) == 2));
    assert_eq!(grid_graph(1, 1).unwrap().components().len(), 1);
    let g = grid_graph(2, 3).unwrap();
    assert_eq!(g.n_edges(), 7);
    assert_eq!(g.components().len(), 1);
    assert!(ring_graph(2).is_err());
    assert!(grid_graph(0, 3).is_err());
}

#[test]
fn overflow_guard() {
    let mut cfg = flat_config(2, 1e12);
    cfg.count_mode = CountMode::Expected;
    assert!(simulate(&cfg).is_err());
}
