use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::kernels::KernelSpec;
use super::mmd::mmd_unbiased;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Diagonal loading applied to both covariances before the square root.
pub const FRECHET_EPS: f64 = 1e-6;

/// Sample mean and unbiased covariance of the rows of `x`.
pub fn mean_cov(x: &Tensor) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (n, d) = (x.batch(), x.item_len());
    if n < 2 {
        return Err(Error::Domain(format!(
            "covariance needs at least 2 samples, got {n}"
        )));
    }
    let m = DMatrix::from_row_slice(n, d, x.data());
    let mu = m.row_mean().transpose();
    let mut c = m;
    for mut row in c.row_iter_mut() {
        row -= mu.transpose();
    }
    let cov = c.transpose() * &c / (n as f64 - 1.0);
    Ok((mu, cov))
}

fn psd_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(a.clone());
    let s = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&s) * e.eigenvectors.transpose()
}

/// `||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)`.
///
/// The cross term uses the symmetric form, whose trace equals that of
/// `(S_a S_b)^1/2`, so one symmetric eigendecomposition suffices.
pub fn frechet_gaussian(
    mu_a: &DVector<f64>,
    cov_a: &DMatrix<f64>,
    mu_b: &DVector<f64>,
    cov_b: &DMatrix<f64>,
) -> Result<f64> {
    let d = mu_a.len();
    if mu_b.len() != d || cov_a.shape() != (d, d) || cov_b.shape() != (d, d) {
        return Err(Error::Dimension(
            "Frechet distance needs matching dimensions".into(),
        ));
    }
    let reg = DMatrix::<f64>::identity(d, d) * FRECHET_EPS;
    let (a, b) = (cov_a + &reg, cov_b + &reg);
    let ra = psd_sqrt(&a);
    let mut inner = &ra * &b * &ra;
    inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    let dist = (mu_a - mu_b).norm_squared() + a.trace() + b.trace() - 2.0 * cross;
    if !dist.is_finite() {
        return Err(Error::Numerical("Frechet distance is not finite".into()));
    }
    Ok(dist)
}

/// Frechet distance between Gaussian fits of two feature sets (rows).
pub fn toy_fid(features_a: &Tensor, features_b: &Tensor) -> Result<f64> {
    let d = features_a.item_len();
    if features_b.item_len() != d {
        return Err(Error::Dimension(format!(
            "feature dims differ: {d} vs {}",
            features_b.item_len()
        )));
    }
    let (ma, ca) = mean_cov(features_a)?;
    let (mb, cb) = mean_cov(features_b)?;
    frechet_gaussian(&ma, &ca, &mb, &cb)
}

/// Unbiased MMD in feature space.
pub fn immd(features_a: &Tensor, features_b: &Tensor, kernel: &KernelSpec) -> Result<f64> {
    mmd_unbiased(features_a, features_b, kernel)
}
