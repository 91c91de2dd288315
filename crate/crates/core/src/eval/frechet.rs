use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Added to each covariance diagonal before the matrix square roots.
pub const COVARIANCE_RIDGE: f64 = 1e-6;
/// Eigenvalues below `-PSD_TOLERANCE` (after the ridge) are rejected.
const PSD_TOLERANCE: f64 = 1e-9;

/// Gaussian fit of a feature sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrechetStats {
    pub mean: Vec<f64>,
    /// Row-major `d x d` covariance.
    pub covariance: Vec<f64>,
    pub count: usize,
}

impl FrechetStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Sample mean and unbiased covariance of `rows`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            return Err(Error::invalid("samples", format!("{n} rows; need at least 2")));
        }
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("feature rows differ in length".into()));
        }
        let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
        let mean = x.row_mean();
        let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        Ok(Self {
            mean: mean.iter().copied().collect(),
            covariance: cov.transpose().as_slice().to_vec(),
            count: n,
        })
    }

    pub fn from_moments(mean: Vec<f64>, covariance: Vec<f64>, count: usize) -> Result<Self> {
        let d = mean.len();
        if covariance.len() != d * d {
            return Err(Error::Shape(format!("covariance has {} entries for dim {d}", covariance.len())));
        }
        Ok(Self {
            mean,
            covariance,
            count,
        })
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        let m = DMatrix::from_row_slice(d, d, &self.covariance);
        (&m + m.transpose()) * 0.5 + DMatrix::identity(d, d) * COVARIANCE_RIDGE
    }
}

fn checked_eigen(m: DMatrix<f64>, which: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let e = SymmetricEigen::new(m);
    let min = e.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min < -PSD_TOLERANCE || !min.is_finite() {
        log::debug!("{which} has minimum eigenvalue {min:e}");
        return Err(Error::NotPsd { min_eigenvalue: min });
    }
    Ok(e)
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`.
///
/// The trace of the square root is taken from the eigenvalues of the
/// symmetric matrix `S_a^(1/2) S_b S_a^(1/2)`, which has the same spectrum
/// as `S_a S_b`.
pub fn frechet_distance(a: &FrechetStats, b: &FrechetStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("dims {} vs {}", a.dim(), b.dim())));
    }
    let mu = DVector::from_vec(a.mean.clone()) - DVector::from_vec(b.mean.clone());
    let sa = a.cov_matrix();
    let sb = b.cov_matrix();
    let ea = checked_eigen(sa.clone(), "first covariance")?;
    checked_eigen(sb.clone(), "second covariance")?;
    let sqrt_vals = ea.eigenvalues.map(|v| v.max(0.0).sqrt());
    let sqrt_a = &ea.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * ea.eigenvectors.transpose();
    let m = &sqrt_a * &sb * &sqrt_a;
    let inner = SymmetricEigen::new((&m + m.transpose()) * 0.5);
    let tr_sqrt: f64 = inner.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let d = mu.norm_squared() + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
    Ok(d.max(0.0))
}
