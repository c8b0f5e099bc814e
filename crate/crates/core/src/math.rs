//! Shared numerical helpers: symmetrization, PSD checks, matrix square
//! roots, the standard normal CDF and log-factorials.

use libm::{erfc, lgamma};
use nalgebra::{DMatrix, DVector};

/// Symmetry/PSD tolerance used by belief and spec constructors.
pub const PSD_TOL: f64 = 1e-10;

/// Return the symmetric part (C + Cᵀ)/2.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    0.5 * (m + m.transpose())
}

/// Max absolute deviation from symmetry.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Check that `m` is symmetric PSD to `tol` (eigenvalues ≥ −tol).
pub fn is_symmetric_psd(m: &DMatrix<f64>, tol: f64) -> bool {
    if m.nrows() != m.ncols() || asymmetry(m) > tol {
        return false;
    }
    let eig = symmetrize(m).symmetric_eigen();
    eig.eigenvalues.iter().all(|&l| l >= -tol)
}

/// Symmetric PSD square root via eigendecomposition, clamping tiny negative
/// eigenvalues to zero. Suitable for sampling from N(0, M) with singular M.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(m).symmetric_eigen();
    let n = m.nrows();
    let mut scaled = eig.eigenvectors.clone();
    for j in 0..n {
        let s = eig.eigenvalues[j].max(0.0).sqrt();
        for i in 0..n {
            scaled[(i, j)] *= s;
        }
    }
    // sqrt(M) = V diag(sqrt(λ)) Vᵀ
    &scaled * eig.eigenvectors.transpose()
}

/// Spectral radius of a square real matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max)
}

/// Standard normal CDF via the complementary error function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// log Γ(x+1); valid for real x ≥ 0 (generalized factorial).
pub fn ln_factorial(x: f64) -> f64 {
    lgamma(x + 1.0)
}

/// log N(y; mean, cov) for a multivariate normal with PD covariance.
pub fn gaussian_log_density(y: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Option<f64> {
    let chol = cov.clone().cholesky()?;
    let dim = y.len() as f64;
    let resid = y - mean;
    let solved = chol.solve(&resid);
    let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Some(-0.5 * (dim * (2.0 * std::f64::consts::PI).ln() + log_det + resid.dot(&solved)))
}
