//! Small dense-matrix and distribution kernels.
//!
//! Everything here works on matrices of dimension up to a few dozen, which is
//! the size of the parameter vectors handled by the working models.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use statrs::distribution::{ChiSquared, ContinuousCDF, Continuous, Normal};

use crate::error::{Error, Result};

/// Default eigenvalue floor applied before inverting a variance matrix.
pub const DEFAULT_EIGEN_FLOOR: f64 = 1e-6;

const SYMMETRY_TOL: f64 = 1e-12;

/// A finite, symmetric square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    /// Validates that `m` is square, finite and symmetric.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::InvalidMatrix(format!(
                "{}x{} is not square",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidMatrix("non-finite entry".into()));
        }
        let scale = m.iter().fold(1.0_f64, |acc, v| acc.max(v.abs()));
        for i in 0..m.nrows() {
            for j in (i + 1)..m.ncols() {
                if (m[(i, j)] - m[(j, i)]).abs() > SYMMETRY_TOL * scale {
                    return Err(Error::InvalidMatrix(format!(
                        "entry ({i},{j}) = {} differs from ({j},{i}) = {}",
                        m[(i, j)],
                        m[(j, i)]
                    )));
                }
            }
        }
        Ok(Self(m))
    }

    /// Averages `m` with its transpose. Use for accumulated sums whose
    /// asymmetry is pure rounding.
    pub fn symmetrized(m: DMatrix<f64>) -> Result<Self> {
        let t = m.transpose();
        Self::new((m + t) * 0.5)
    }

    pub fn identity(dim: usize) -> Self {
        Self(DMatrix::identity(dim, dim))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(DMatrix::zeros(dim, dim))
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = SymmetricEigen::new(self.0.clone()).eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| a.total_cmp(b));
        ev
    }

    /// Spectral norm.
    pub fn op_norm(&self) -> f64 {
        self.eigenvalues().iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
    }
}

/// Spectral norm of an arbitrary dense matrix.
pub fn op_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    let gram = m.transpose() * m;
    let ev = SymmetricEigen::new(gram).eigenvalues;
    ev.iter().fold(0.0_f64, |acc, v| acc.max(*v)).max(0.0).sqrt()
}

/// Inverse square root of a symmetric matrix through its eigendecomposition.
///
/// Each eigenvalue λ is replaced by `1 / sqrt(max(λ, floor))`, so the result is
/// always positive definite with eigenvalues in `(0, 1/sqrt(floor)]`.
pub fn sym_inv_sqrt(m: &SymMatrix, floor: f64) -> Result<SymMatrix> {
    if !(floor > 0.0 && floor.is_finite()) {
        return Err(Error::Domain(format!("eigenvalue floor must be positive, got {floor}")));
    }
    let eig = SymmetricEigen::new(m.0.clone());
    let scaled = eig.eigenvalues.map(|l| 1.0 / l.max(floor).sqrt());
    let q = &eig.eigenvectors;
    let w = q * DMatrix::from_diagonal(&scaled) * q.transpose();
    SymMatrix::symmetrized(w)
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    standard_normal().cdf(x)
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    standard_normal().pdf(x)
}

/// Standard normal quantile for `p` in `(0, 1)`.
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("normal quantile needs p in (0,1), got {p}")));
    }
    // Odd symmetry is exact by construction.
    if p > 0.5 {
        return normal_quantile(1.0 - p).map(|q| -q);
    }
    let mut x = standard_normal().inverse_cdf(p);
    for _ in 0..3 {
        let pdf = normal_pdf(x);
        if pdf <= 0.0 {
            break;
        }
        x -= (normal_cdf(x) - p) / pdf;
    }
    Ok(x)
}

/// Quantile of the chi-square distribution with `dof` degrees of freedom.
pub fn chi2_quantile(dof: usize, p: f64) -> Result<f64> {
    if dof == 0 {
        return Err(Error::Domain("chi-square needs at least one degree of freedom".into()));
    }
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Domain(format!("chi-square quantile needs p in [0,1), got {p}")));
    }
    if p == 0.0 {
        return Ok(0.0);
    }
    let dist = ChiSquared::new(dof as f64).map_err(|e| Error::Domain(e.to_string()))?;
    let mut x = dist.inverse_cdf(p);
    // Newton polish against the regularized incomplete gamma CDF.
    for _ in 0..8 {
        let pdf = dist.pdf(x);
        if !(pdf > 0.0) {
            break;
        }
        let step = (dist.cdf(x) - p) / pdf;
        let next = (x - step).max(x * 0.5);
        if (next - x).abs() <= 1e-14 * x.max(1.0) {
            x = next;
            break;
        }
        x = next;
    }
    Ok(x)
}

fn standard_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal is valid")
}

/// `x xᵀ` for a column vector.
pub fn outer(x: &DVector<f64>) -> DMatrix<f64> {
    x * x.transpose()
}
