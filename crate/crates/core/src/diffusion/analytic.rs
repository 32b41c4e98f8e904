//! Closed-form denoisers for Gaussian and Gaussian-mixture data.

use crate::error::{Error, Result};
use crate::skip_tuning::SkipProfile;
use crate::tensor::Tensor;
use crate::unet::Denoiser;

/// Exact posterior mean for data `N(0, variance * I)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianDenoiser {
    pub variance: f64,
}

impl GaussianDenoiser {
    pub fn new(variance: f64) -> Result<Self> {
        if !(variance > 0.0) {
            return Err(Error::Domain(format!(
                "data variance {variance} must be positive"
            )));
        }
        Ok(GaussianDenoiser { variance })
    }

    /// Probability-flow ODE solution: `x(b) = x(a) * sqrt((s^2 + b^2) / (s^2 + a^2))`.
    pub fn flow(&self, x: &Tensor, sigma_from: f64, sigma_to: f64) -> Tensor {
        let s2 = self.variance;
        x.scale(((s2 + sigma_to * sigma_to) / (s2 + sigma_from * sigma_from)).sqrt())
    }

    /// Posterior variance per dimension, `s^2 sigma^2 / (s^2 + sigma^2)`.
    pub fn posterior_variance(&self, sigma: f64) -> f64 {
        self.variance * sigma * sigma / (self.variance + sigma * sigma)
    }
}

impl Denoiser for GaussianDenoiser {
    fn denoise(&self, x: &Tensor, sigma: f64, _profile: Option<&SkipProfile>) -> Result<Tensor> {
        Ok(x.scale(self.variance / (self.variance + sigma * sigma)))
    }
}

/// Exact posterior mean for an isotropic Gaussian mixture
/// `sum_k w_k N(mu_k, v I)` over flattened items.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmDenoiser {
    pub means: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub variance: f64,
}

impl GmmDenoiser {
    pub fn new(means: Vec<Vec<f64>>, weights: Vec<f64>, variance: f64) -> Result<Self> {
        if means.is_empty() || means.len() != weights.len() {
            return Err(Error::Config("mixture needs one weight per mean".into()));
        }
        let dim = means[0].len();
        if means.iter().any(|m| m.len() != dim) {
            return Err(Error::Dimension("mixture means differ in dimension".into()));
        }
        if !(variance > 0.0) || weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::Domain(
                "mixture variance and weights must be positive".into(),
            ));
        }
        Ok(GmmDenoiser {
            means,
            weights,
            variance,
        })
    }
}

impl Denoiser for GmmDenoiser {
    fn denoise(&self, x: &Tensor, sigma: f64, _profile: Option<&SkipProfile>) -> Result<Tensor> {
        let dim = self.means[0].len();
        if x.item_len() != dim {
            return Err(Error::Dimension(format!(
                "items of size {} for mixture of dim {dim}",
                x.item_len()
            )));
        }
        let v = self.variance;
        let tot = v + sigma * sigma;
        let shrink = v / tot;
        let mut out = Vec::with_capacity(x.len());
        for b in 0..x.batch() {
            let xi = x.item_slice(b);
            let logits: Vec<f64> = self
                .means
                .iter()
                .zip(&self.weights)
                .map(|(m, w)| {
                    let d2: f64 = xi.iter().zip(m).map(|(a, c)| (a - c) * (a - c)).sum();
                    w.ln() - 0.5 * d2 / tot
                })
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ws: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = ws.iter().sum();
            for j in 0..dim {
                let mut acc = 0.0;
                for (m, r) in self.means.iter().zip(&ws) {
                    acc += r / z * (m[j] + shrink * (xi[j] - m[j]));
                }
                out.push(acc);
            }
        }
        Tensor::new(x.shape(), out)
    }
}
