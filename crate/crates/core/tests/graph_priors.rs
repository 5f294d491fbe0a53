mod common;

use common::*;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spatial_lc::graph::{besag_structure, bym2_precision, scale_structure, SpatialGraph, SpatialStructure};
use spatial_lc::linalg::to_dense;
use spatial_lc::priors::{pc_prior_stddev, rw2_structure, Rw2Prior};

/// Connected random graph: a random spanning tree plus extra edges.
fn random_connected(n: usize, extra: usize, seed: u64) -> SpatialGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for i in 1..n {
        edges.push((rng.random_range(0..i), i));
    }
    for _ in 0..extra {
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        if a != b && !edges.contains(&(a, b)) && !edges.contains(&(b, a)) {
            edges.push((a, b));
        }
    }
    SpatialGraph::from_edges(n, &edges).unwrap()
}

fn marginal_variance_of_omega(r_scaled: &DMatrix<f64>, sigma: f64, phi: f64, area: usize) -> f64 {
    let n = r_scaled.nrows();
    sigma * sigma * ((1.0 - phi) * (1.0 - 1.0 / n as f64) + phi * sym_pinv(r_scaled)[(area, area)])
}

#[test]
fn bym2_phi_zero_is_iid() {
    let g = SpatialGraph::grid(3, 4).unwrap();
    let r = scale_structure(&besag_structure(&g), &g).unwrap();
    for sigma in [1.0, 0.5, 0.3] {
        let q = bym2_precision(&r, 0.0, sigma).unwrap().omega_block();
        let n = g.n_areas();
        let mut tri = sprs::TriMat::new((n, n));
        for i in 0..n {
            tri.add_triplet(i, i, 1.0 / (sigma * sigma * 1.0));
        }
        let want: sprs::CsMat<f64> = tri.to_csr();
        assert_eq!(q.indptr(), want.indptr());
        assert_eq!(q.indices(), want.indices());
        assert_eq!(q.data(), want.data());
    }
}

#[test]
fn bym2_phi_one_is_scaled_besag() {
    let g = SpatialGraph::grid(3, 4).unwrap();
    let raw = besag_dense(&g);
    let f = scale_structure(&besag_structure(&g), &g).unwrap();
    let factor = f.scaling_factors[0];
    for sigma in [1.0, 0.5, 0.3] {
        let q = bym2_precision(&f, 1.0, sigma).unwrap().omega_block();
        let dense = to_dense(&q);
        let mut nnz = 0;
        for i in 0..raw.nrows() {
            for j in 0..raw.ncols() {
                let want = raw[(i, j)] * factor / (sigma * sigma);
                assert_eq!(dense[(i, j)], want);
                nnz += (raw[(i, j)] != 0.0) as usize;
            }
        }
        assert_eq!(q.nnz(), nnz);
    }
}

#[test]
fn marginal_variance_moves_monotonically_between_endpoints() {
    let g = SpatialGraph::grid(3, 3).unwrap();
    let r = besag_dense(&g);
    let rs = &r * dense_scaling(&r);
    for area in [0, 4] {
        let v: Vec<f64> = (0..=10).map(|k| marginal_variance_of_omega(&rs, 0.7, k as f64 / 10.0, area)).collect();
        let increasing = v.windows(2).all(|w| w[1] >= w[0]);
        let decreasing = v.windows(2).all(|w| w[1] <= w[0]);
        assert!(increasing || decreasing, "{v:?}");
    }
}

#[test]
fn bym2_sampled_variance_matches_dense() {
    use spatial_lc::simulate::sample_bym2;
    let g = SpatialGraph::ring(6).unwrap();
    let st = SpatialStructure::new(&g).unwrap();
    let r = besag_dense(&g);
    let rs = &r * dense_scaling(&r);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (sigma, phi) = (0.8, 0.6);
    let n = 20000;
    let mut acc = 0.0;
    for _ in 0..n {
        let (omega, _) = sample_bym2(&st, sigma, phi, &mut rng).unwrap();
        acc += omega[0] * omega[0];
    }
    let var = acc / n as f64;
    let want = marginal_variance_of_omega(&rs, sigma, phi, 0);
    // the variance estimate of a Gaussian has relative sd sqrt(2/n)
    assert!((var - want).abs() < 4.0 * want * (2.0 / n as f64).sqrt(), "{var} vs {want}");
}

#[test]
fn rw2_pseudo_determinant_matches_eigenvalues() {
    for t in [3, 10, 30] {
        let p = Rw2Prior::new(t).unwrap();
        let dense = rw2_dense(t) * dense_scaling(&rw2_dense(t));
        let mut ev: Vec<f64> = nalgebra::SymmetricEigen::new(dense).eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| a.total_cmp(b));
        let want: f64 = ev[2..].iter().map(|e| e.ln()).sum();
        assert!((p.log_pseudo_det() - want).abs() < 1e-8);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn besag_scaling_matches_generalised_inverse(n in 2usize..=50, extra in 0usize..30, seed in any::<u64>()) {
        let g = random_connected(n, extra, seed);
        let scaled = scale_structure(&besag_structure(&g), &g).unwrap();
        let want = dense_scaling(&besag_dense(&g));
        prop_assert!((scaled.scaling_factors[0] - want).abs() < 1e-8);
        let after = dense_scaling(&to_dense(&scaled.matrix));
        prop_assert!((after - 1.0).abs() < 1e-8);
    }

    #[test]
    fn rw2_scaling_matches_generalised_inverse(t in 3usize..=30) {
        let p = Rw2Prior::new(t).unwrap();
        let want = dense_scaling(&rw2_dense(t));
        prop_assert!((p.scaling_factor - want).abs() < 1e-8);
        prop_assert!((dense_scaling(&p.scaled_dense()) - 1.0).abs() < 1e-8);
        prop_assert_eq!(to_dense(&rw2_structure(t).unwrap()), rw2_dense(t));
    }

    #[test]
    fn besag_rows_sum_to_zero(n in 1usize..40, extra in 0usize..20, seed in any::<u64>()) {
        let g = random_connected(n, extra, seed);
        let r = to_dense(&besag_structure(&g).matrix);
        for i in 0..n {
            prop_assert_eq!(r.row(i).sum(), 0.0);
        }
        prop_assert_eq!(r.transpose(), r.clone());
        let ev = nalgebra::SymmetricEigen::new(r).eigenvalues;
        prop_assert!(ev.iter().all(|&e| e > -1e-9));
    }

    #[test]
    fn components_partition_the_areas(n in 1usize..30, edges in proptest::collection::vec((0usize..30, 0usize..30), 0..25)) {
        let edges: Vec<(usize, usize)> = edges.into_iter().filter(|(a, b)| a < &n && b < &n && a != b).collect();
        let g = SpatialGraph::from_edges(n, &edges).unwrap();
        let mut seen = vec![0; n];
        for comp in g.components() {
            for &i in comp {
                seen[i] += 1;
                for &j in g.neighbors(i) {
                    prop_assert!(comp.contains(&j));
                    prop_assert!(g.neighbors(j).contains(&i));
                }
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn pc_stddev_density_formula(u in 0.01f64..10.0, alpha in 0.001f64..0.999, s in 0.001f64..20.0) {
        let p = pc_prior_stddev(u, alpha).unwrap();
        let lambda = -alpha.ln() / u;
        prop_assert_eq!(p.log_density(s), lambda.ln() - lambda * s);
    }
}
