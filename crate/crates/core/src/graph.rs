//! Area adjacency graphs and the structured spatial prior built on them:
//! Besag structure matrices, per-component scaling, the singleton-island
//! adjustment and the BYM2 precision.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use sprs::{CsMat, TriMat};

use crate::error::{Error, Result};
use crate::linalg;

/// Undirected neighbourhood structure over `n_areas` nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpatialGraph {
    neighbors: Vec<Vec<usize>>,
    components: Vec<Vec<usize>>,
    n_edges: usize,
}

impl SpatialGraph {
    /// Build from neighbour lists. Lists are sorted and de-duplicated; the
    /// relation must be symmetric and free of self-loops.
    pub fn from_neighbors(mut neighbors: Vec<Vec<usize>>) -> Result<Self> {
        let n = neighbors.len();
        if n == 0 {
            return Err(Error::Graph("graph has no nodes".into()));
        }
        for (i, list) in neighbors.iter_mut().enumerate() {
            list.sort_unstable();
            list.dedup();
            if list.iter().any(|&j| j >= n) {
                return Err(Error::Graph(format!("node {i} has an out-of-range neighbour")));
            }
            if list.contains(&i) {
                return Err(Error::Graph(format!("self-neighbor at node {i}")));
            }
        }
        let mut n_edges = 0;
        for i in 0..n {
            for &j in &neighbors[i] {
                if neighbors[j].binary_search(&i).is_err() {
                    return Err(Error::Graph(format!("asymmetric edge {i} -> {j}")));
                }
                if i < j {
                    n_edges += 1;
                }
            }
        }
        let components = connected_components(&neighbors);
        Ok(Self {
            neighbors,
            components,
            n_edges,
        })
    }

    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut nb = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::Graph(format!("edge ({a}, {b}) out of range")));
            }
            nb[a].push(b);
            nb[b].push(a);
        }
        Self::from_neighbors(nb)
    }

    /// Cycle on `n >= 3` nodes.
    pub fn ring(n: usize) -> Result<Self> {
        if n < 3 {
            return Err(Error::InvalidParameter(format!("ring graph needs at least 3 nodes, got {n}")));
        }
        let edges: Vec<_> = (0..n).map(|i| (i, (i + 1) % n)).collect();
        Self::from_edges(n, &edges)
    }

    /// Four-neighbour lattice, nodes numbered row-major.
    pub fn grid(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidParameter(format!("grid dimensions must be positive, got {rows}x{cols}")));
        }
        let mut edges = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                let i = r * cols + c;
                if c + 1 < cols {
                    edges.push((i, i + 1));
                }
                if r + 1 < rows {
                    edges.push((i, i + cols));
                }
            }
        }
        Self::from_edges(rows * cols, &edges)
    }

    pub fn n_areas(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    /// Maximal connected sets, each sorted, ordered by their smallest node.
    pub fn components(&self) -> &[Vec<usize>] {
        &self.components
    }

    pub fn n_edges(&self) -> usize {
        self.n_edges
    }

    /// Components with more than one node.
    pub fn connected_components(&self) -> impl Iterator<Item = &Vec<usize>> {
        self.components.iter().filter(|c| c.len() > 1)
    }
}

fn connected_components(neighbors: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let n = neighbors.len();
    let mut seen = vec![false; n];
    let mut out = Vec::new();
    for start in 0..n {
        if seen[start] {
            continue;
        }
        let mut comp = vec![start];
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            for &j in &neighbors[i] {
                if !seen[j] {
                    seen[j] = true;
                    comp.push(j);
                    queue.push_back(j);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// Sparse symmetric PSD structure matrix of an intrinsic model.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureMatrix {
    pub matrix: CsMat<f64>,
    /// Dimension of the null space.
    pub rank_deficiency: usize,
    /// One factor per connected component (1 for unscaled or singleton components).
    pub scaling_factors: Vec<f64>,
}

impl StructureMatrix {
    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        linalg::to_dense(&self.matrix)
    }

    /// Dump as `i j value` lines (zero-based indices).
    pub fn write_coordinates<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let mut entries: Vec<(usize, usize, f64)> = self.matrix.iter().map(|(v, (i, j))| (i, j, *v)).collect();
        entries.sort_by_key(|&(i, j, _)| (i, j));
        for (i, j, v) in entries {
            writeln!(out, "{i} {j} {v}")?;
        }
        Ok(())
    }
}

/// Besag structure: degree on the diagonal, -1 between neighbours.
pub fn besag_structure(graph: &SpatialGraph) -> StructureMatrix {
    let n = graph.n_areas();
    let mut tri = TriMat::new((n, n));
    for i in 0..n {
        if graph.degree(i) > 0 {
            tri.add_triplet(i, i, graph.degree(i) as f64);
        }
        for &j in graph.neighbors(i) {
            tri.add_triplet(i, j, -1.0);
        }
    }
    StructureMatrix {
        matrix: tri.to_csr(),
        rank_deficiency: graph.components().len(),
        scaling_factors: vec![1.0; graph.components().len()],
    }
}

/// Scaling factor of one component's block: the geometric mean of the
/// marginal variances under a sum-to-zero constraint.
fn component_scaling(r: &DMatrix<f64>, comp: &[usize]) -> Result<f64> {
    let m = comp.len();
    let block = DMatrix::from_fn(m, m, |a, b| r[(comp[a], comp[b])]);
    let ones = DMatrix::from_element(m, 1, 1.0);
    let var = linalg::constrained_marginal_variances(&block, &ones, &[0])?;
    if var.iter().any(|v| !v.is_finite() || *v <= 0.0) {
        return Err(Error::Numerical("non-positive marginal variance in Besag component".into()));
    }
    Ok(linalg::geometric_mean(&var))
}

/// Multiply each non-singleton component's block so that the geometric mean
/// of its constrained marginal variances is one.
pub fn scale_structure(r: &StructureMatrix, graph: &SpatialGraph) -> Result<StructureMatrix> {
    let dense = r.to_dense();
    let mut factor_of_node = vec![1.0; graph.n_areas()];
    let mut factors = Vec::with_capacity(graph.components().len());
    for comp in graph.components() {
        let f = if comp.len() > 1 { component_scaling(&dense, comp)? } else { 1.0 };
        for &i in comp {
            factor_of_node[i] = f;
        }
        factors.push(f);
    }
    let mut tri = TriMat::new((r.dim(), r.dim()));
    for (v, (i, j)) in r.matrix.iter() {
        tri.add_triplet(i, j, v * factor_of_node[i]);
    }
    Ok(StructureMatrix {
        matrix: tri.to_csr(),
        rank_deficiency: r.rank_deficiency,
        scaling_factors: factors,
    })
}

/// Sum-to-zero constraints required by the spatial field: one per
/// non-singleton component.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConstraintPlan {
    pub components: Vec<Vec<usize>>,
}

/// Give singleton components an independent unit-variance effect and one
/// sum-to-zero constraint to every other component.
pub fn adjust_disconnected(r: &StructureMatrix, graph: &SpatialGraph) -> (StructureMatrix, ConstraintPlan) {
    let mut tri = TriMat::new((r.dim(), r.dim()));
    for (v, (i, j)) in r.matrix.iter() {
        tri.add_triplet(i, j, *v);
    }
    let mut constrained = Vec::new();
    for comp in graph.components() {
        if comp.len() == 1 {
            tri.add_triplet(comp[0], comp[0], 1.0);
        } else {
            constrained.push(comp.clone());
        }
    }
    let adjusted = StructureMatrix {
        matrix: tri.to_csr(),
        rank_deficiency: constrained.len(),
        scaling_factors: r.scaling_factors.clone(),
    };
    (adjusted, ConstraintPlan { components: constrained })
}

/// The scaled, island-adjusted Besag structure with the derived quantities
/// the BYM2 prior needs.
#[derive(Debug, Clone)]
pub struct SpatialStructure {
    pub structure: StructureMatrix,
    pub plan: ConstraintPlan,
    /// log of the product of the non-zero eigenvalues of the structure.
    pub log_pseudo_det: f64,
    /// Eigenvalues of the generalised inverse (zero on null directions).
    pub generalized_inverse_eigenvalues: Vec<f64>,
}

impl SpatialStructure {
    pub fn new(graph: &SpatialGraph) -> Result<Self> {
        let raw = besag_structure(graph);
        let scaled = scale_structure(&raw, graph)?;
        let (structure, plan) = adjust_disconnected(&scaled, graph);
        let dense = structure.to_dense();
        let mut ev: Vec<f64> = SymmetricEigen::new(dense).eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| a.partial_cmp(b).expect("finite eigenvalues"));
        let nullity = structure.rank_deficiency;
        if ev[nullity..].iter().any(|&e| e <= 0.0) {
            return Err(Error::Numerical("adjusted Besag structure has unexpected null directions".into()));
        }
        let log_pseudo_det = ev[nullity..].iter().map(|e| e.ln()).sum();
        let generalized_inverse_eigenvalues = ev
            .iter()
            .enumerate()
            .map(|(i, &e)| if i < nullity { 0.0 } else { 1.0 / e })
            .collect();
        Ok(Self {
            structure,
            plan,
            log_pseudo_det,
            generalized_inverse_eigenvalues,
        })
    }

    pub fn n_areas(&self) -> usize {
        self.structure.dim()
    }

    /// Number of constrained (non-singleton) components.
    pub fn n_constrained(&self) -> usize {
        self.plan.components.len()
    }
}

/// Coefficients of the BYM2 joint precision over `(ω, u)` for `0 <= φ < 1`:
///
/// ```text
/// Q = [ a·I        -b·I      ]
///     [ -b·I   R* + c·I      ]
/// ```
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bym2Coefficients {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Bym2Coefficients {
    pub fn new(phi: f64, sigma: f64) -> Result<Self> {
        check_bym2(phi, sigma)?;
        if phi >= 1.0 {
            return Err(Error::InvalidParameter("the joint (ω, u) precision needs phi < 1".into()));
        }
        let one_minus = 1.0 - phi;
        Ok(Self {
            a: 1.0 / (sigma * sigma * one_minus),
            b: phi.sqrt() / (sigma * one_minus),
            c: phi / one_minus,
        })
    }
}

fn check_bym2(phi: f64, sigma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&phi) {
        return Err(Error::InvalidParameter(format!("phi must lie in [0, 1], got {phi}")));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidParameter(format!("sigma_omega must be positive, got {sigma}")));
    }
    Ok(())
}

/// Precision of the BYM2 field `ω = σ(√(1-φ)·v + √φ·u)`.
#[derive(Debug, Clone, PartialEq)]
pub enum Bym2Precision {
    /// Joint precision over the stacked vector `(ω, u)` (dimension `2n`), used for `φ < 1`.
    Joint(CsMat<f64>),
    /// `φ = 1`: `ω = σ·u`, so `ω` has precision `R*/σ²`.
    Besag(CsMat<f64>),
}

impl Bym2Precision {
    /// Precision block acting on `ω` alone.
    pub fn omega_block(&self) -> CsMat<f64> {
        match self {
            Bym2Precision::Besag(m) => m.clone(),
            Bym2Precision::Joint(m) => {
                let n = m.rows() / 2;
                sub_block(m, 0..n, 0..n)
            }
        }
    }
}

fn sub_block(m: &CsMat<f64>, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> CsMat<f64> {
    let mut tri = TriMat::new((rows.len(), cols.len()));
    for (v, (i, j)) in m.iter() {
        if rows.contains(&i) && cols.contains(&j) {
            tri.add_triplet(i - rows.start, j - cols.start, *v);
        }
    }
    tri.to_csr()
}

pub fn bym2_precision(r_scaled: &StructureMatrix, phi: f64, sigma: f64) -> Result<Bym2Precision> {
    check_bym2(phi, sigma)?;
    let n = r_scaled.dim();
    if phi == 1.0 {
        let var = sigma * sigma;
        let mut tri = TriMat::new((n, n));
        for (v, (i, j)) in r_scaled.matrix.iter() {
            tri.add_triplet(i, j, v / var);
        }
        return Ok(Bym2Precision::Besag(tri.to_csr()));
    }
    let k = Bym2Coefficients::new(phi, sigma)?;
    let mut tri = TriMat::new((2 * n, 2 * n));
    for i in 0..n {
        tri.add_triplet(i, i, k.a);
        if k.b != 0.0 {
            tri.add_triplet(i, n + i, -k.b);
            tri.add_triplet(n + i, i, -k.b);
        }
        if k.c != 0.0 {
            tri.add_triplet(n + i, n + i, k.c);
        }
    }
    for (v, (i, j)) in r_scaled.matrix.iter() {
        tri.add_triplet(n + i, n + j, *v);
    }
    Ok(Bym2Precision::Joint(tri.to_csr()))
}

/// Write a structure matrix in coordinate text format.
pub fn dump_structure(path: &Path, s: &StructureMatrix) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    s.write_coordinates(std::io::BufWriter::new(f)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(m: &CsMat<f64>) -> DMatrix<f64> {
        linalg::to_dense(m)
    }

    #[test]
    fn besag_path_and_triangle() {
        let path = SpatialGraph::from_edges(2, &[(0, 1)]).unwrap();
        let r = besag_structure(&path);
        assert_eq!(dense(&r.matrix), DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]));
        assert_eq!(r.rank_deficiency, 1);

        let tri = SpatialGraph::ring(3).unwrap();
        let r = dense(&besag_structure(&tri).matrix);
        for i in 0..3 {
            assert_eq!(r[(i, i)], 2.0);
            for j in 0..3 {
                if i != j {
                    assert_eq!(r[(i, j)], -1.0);
                }
            }
        }
    }

    #[test]
    fn row_sums_vanish() {
        let g = SpatialGraph::from_edges(6, &[(0, 1), (1, 2), (3, 4)]).unwrap();
        let r = dense(&besag_structure(&g).matrix);
        for i in 0..6 {
            assert_eq!(r.row(i).sum(), 0.0);
        }
        assert_eq!(besag_structure(&g).rank_deficiency, 3);
    }

    #[test]
    fn grid_and_ring_constructors() {
        let g = SpatialGraph::grid(2, 3).unwrap();
        assert_eq!(g.n_edges(), 7);
        assert_eq!(g.components().len(), 1);
        let single = SpatialGraph::grid(1, 1).unwrap();
        assert_eq!(single.components().len(), 1);
        assert_eq!(single.n_edges(), 0);
        let ring = SpatialGraph::ring(3).unwrap();
        assert!((0..3).all(|i| ring.degree(i) == 2));
        assert!(SpatialGraph::ring(2).is_err());
        assert!(SpatialGraph::grid(0, 2).is_err());
    }

    #[test]
    fn identical_components_share_scaling() {
        let g = SpatialGraph::from_edges(4, &[(0, 1), (2, 3)]).unwrap();
        let s = scale_structure(&besag_structure(&g), &g).unwrap();
        assert_eq!(s.scaling_factors.len(), 2);
        assert!((s.scaling_factors[0] - s.scaling_factors[1]).abs() < 1e-15);
        // two-node path: constrained variances are 1/4 each
        assert!((s.scaling_factors[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn island_adjustment() {
        let g = SpatialGraph::from_edges(3, &[(0, 1)]).unwrap();
        let scaled = scale_structure(&besag_structure(&g), &g).unwrap();
        let (adj, plan) = adjust_disconnected(&scaled, &g);
        assert_eq!(plan.components, vec![vec![0, 1]]);
        let d = dense(&adj.matrix);
        assert_eq!(d[(2, 2)], 1.0);
        assert_eq!(d[(2, 0)], 0.0);
        assert_eq!(adj.rank_deficiency, 1);

        let full = SpatialGraph::ring(5).unwrap();
        let (_, plan) = adjust_disconnected(&besag_structure(&full), &full);
        assert_eq!(plan.components.len(), 1);

        let two = SpatialGraph::from_edges(7, &[(0, 1), (1, 2), (3, 4), (4, 5), (5, 6)]).unwrap();
        let (_, plan) = adjust_disconnected(&besag_structure(&two), &two);
        assert_eq!(plan.components.len(), 2);
    }

    #[test]
    fn bym2_endpoints() {
        let g = SpatialGraph::ring(4).unwrap();
        let s = SpatialStructure::new(&g).unwrap();
        let sigma = 0.7;
        let iid = bym2_precision(&s.structure, 0.0, sigma).unwrap();
        let expect_iid = DMatrix::identity(4, 4) / (sigma * sigma);
        assert_eq!(dense(&iid.omega_block()), expect_iid);
        let besag = bym2_precision(&s.structure, 1.0, sigma).unwrap();
        assert_eq!(dense(&besag.omega_block()), s.structure.to_dense() / (sigma * sigma));
        assert!(bym2_precision(&s.structure, 1.5, 1.0).is_err());
        assert!(bym2_precision(&s.structure, 0.5, 0.0).is_err());
    }
}
