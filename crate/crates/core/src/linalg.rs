//! Small dense helpers shared by the prior and inference modules.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use sprs::CsMat;

use crate::error::{Error, Result};

pub fn to_dense(m: &CsMat<f64>) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(m.rows(), m.cols());
    for (v, (i, j)) in m.iter() {
        d[(i, j)] += *v;
    }
    d
}

pub fn cholesky(m: DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m).ok_or_else(|| Error::Numerical(format!("Cholesky factorisation of {what} failed (matrix not positive definite)")))
}

pub fn chol_log_det(c: &Cholesky<f64, Dyn>) -> f64 {
    let l = c.l_dirty();
    (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0
}

/// Marginal variances of an intrinsic GMRF with structure `r` after
/// conditioning on `null_basisᵀ x = 0`.
///
/// The nodes in `pins` are fixed at zero, which turns `r` into a positive
/// definite matrix; the pinned covariance is then projected onto the
/// orthogonal complement of the null space. `pins` must leave a
/// non-singular system (one node per component for Besag, the first two
/// nodes for RW2).
pub fn constrained_marginal_variances(
    r: &DMatrix<f64>,
    null_basis: &DMatrix<f64>,
    pins: &[usize],
) -> Result<DVector<f64>> {
    let n = r.nrows();
    let free: Vec<usize> = (0..n).filter(|i| !pins.contains(i)).collect();
    let m = free.len();
    let sub = DMatrix::from_fn(m, m, |i, j| r[(free[i], free[j])]);
    let chol = cholesky(sub, "grounded structure matrix")?;
    let inv_sub = chol.inverse();
    let mut pinned = DMatrix::zeros(n, n);
    for i in 0..m {
        for j in 0..m {
            pinned[(free[i], free[j])] = inv_sub[(i, j)];
        }
    }
    // P = I - N (NᵀN)⁻¹ Nᵀ
    let ntn = null_basis.transpose() * null_basis;
    let ntn_inv = ntn
        .try_inverse()
        .ok_or_else(|| Error::Numerical("null-space basis is rank deficient".into()))?;
    let proj = DMatrix::identity(n, n) - null_basis * ntn_inv * null_basis.transpose();
    let cov = &proj * pinned * &proj;
    Ok(cov.diagonal())
}

pub fn geometric_mean(v: &DVector<f64>) -> f64 {
    (v.iter().map(|x| x.ln()).sum::<f64>() / v.len() as f64).exp()
}

/// Log of the product of the non-zero eigenvalues of a symmetric PSD matrix
/// with known nullity.
pub fn log_pseudo_det(m: &DMatrix<f64>, nullity: usize) -> Result<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.partial_cmp(b).expect("finite eigenvalues"));
    let kept = &ev[nullity..];
    if kept.iter().any(|&e| e <= 0.0) {
        return Err(Error::Numerical("structure matrix has more null directions than expected".into()));
    }
    Ok(kept.iter().map(|e| e.ln()).sum())
}

/// Draw from the intrinsic Gaussian with structure `r` restricted to
/// `null_basisᵀ x = 0`.
pub fn sample_intrinsic<R: Rng + ?Sized>(
    r: &DMatrix<f64>,
    null_basis: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let n = r.nrows();
    let m = r + null_basis * null_basis.transpose();
    let chol = cholesky(m, "augmented structure matrix")?;
    let eps = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let y = chol.l().transpose().solve_upper_triangular(&eps).expect("triangular solve");
    let minv_n = chol.solve(null_basis);
    let k = null_basis.transpose() * &minv_n;
    let k_inv = k
        .try_inverse()
        .ok_or_else(|| Error::Numerical("singular constraint system".into()))?;
    Ok(&y - &minv_n * (k_inv * (null_basis.transpose() * &y)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_graph_variances_are_symmetric() {
        let r = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]);
        let n = DMatrix::from_element(2, 1, 1.0);
        let v = constrained_marginal_variances(&r, &n, &[0]).unwrap();
        // x = (e, -e) with e ~ N(0, 1/4)
        assert!((v[0] - 0.25).abs() < 1e-14 && (v[1] - 0.25).abs() < 1e-14);
    }

    #[test]
    fn pseudo_det_of_path() {
        let r = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]);
        assert!((log_pseudo_det(&r, 1).unwrap() - 2f64.ln()).abs() < 1e-12);
    }
}
