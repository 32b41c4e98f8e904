//! Variance-exploding forward process with `sigma(t) = t`, the Karras
//! discretization, training objectives and training loops.

mod analytic;
mod classifier;
mod loss;
mod train;
mod wavelet;

pub use analytic::{GaussianDenoiser, GmmDenoiser};
pub use classifier::{train_classifier, Classifier, ClassifierConfig, CLASSIFIER_CHECKPOINT_KIND};
pub use loss::{
    feature_term, hybrid_term, loss_feature, loss_hybrid, loss_pixel, loss_wavelet_bands,
    pixel_term, residual_bands, wavelet_coefficients_per_band, FeatureMap, IdentityFeatures,
    LinearFeatures, LossBatch, LossConfig, Weighting,
};
pub(crate) use train::draw_batch;
pub use train::{train, Adam, AdamConfig, TrainConfig, TrainReport, Trainer};
pub use wavelet::{haar2d, HaarBands};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub karras_exponent: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule {
            sigma_min: 0.002,
            sigma_max: 80.0,
            karras_exponent: 7.0,
        }
    }
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max && self.sigma_max.is_finite())
        {
            return Err(Error::Config(format!(
                "need 0 < sigma_min < sigma_max, got [{}, {}]",
                self.sigma_min, self.sigma_max
            )));
        }
        if !(self.karras_exponent > 0.0) {
            return Err(Error::Config("karras_exponent must be positive".into()));
        }
        Ok(())
    }

    /// Log-uniform draw over `[sigma_min, sigma_max]`.
    pub fn sample_sigma<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let (a, b) = (self.sigma_min.ln(), self.sigma_max.ln());
        (a + (b - a) * rng.gen::<f64>()).exp()
    }
}

/// `n` noise levels from `sigma_max` down to `sigma_min`, evenly spaced in
/// `sigma^(1/kappa)`. Both endpoints are exact.
pub fn karras_grid(schedule: &NoiseSchedule, n: usize) -> Result<Vec<f64>> {
    schedule.validate()?;
    if n < 2 {
        return Err(Error::Config(format!("karras_grid needs N >= 2, got {n}")));
    }
    let inv = 1.0 / schedule.karras_exponent;
    let (hi, lo) = (schedule.sigma_max.powf(inv), schedule.sigma_min.powf(inv));
    let mut grid: Vec<f64> = (0..n)
        .map(|i| (hi + i as f64 / (n - 1) as f64 * (lo - hi)).powf(schedule.karras_exponent))
        .collect();
    grid[0] = schedule.sigma_max;
    grid[n - 1] = schedule.sigma_min;
    Ok(grid)
}

/// Noise levels visited by an `steps`-step sampler: the Karras grid of
/// `steps` points followed by a terminal 0.
pub fn sampling_sigmas(schedule: &NoiseSchedule, steps: usize) -> Result<Vec<f64>> {
    let mut s = match steps {
        0 => return Err(Error::Config("sampler needs at least one step".into())),
        1 => {
            schedule.validate()?;
            vec![schedule.sigma_max]
        }
        n => karras_grid(schedule, n)?,
    };
    s.push(0.0);
    Ok(s)
}

/// `x0 + sigma * eps`.
pub fn perturb(x0: &Tensor, sigma: f64, eps: &Tensor) -> Result<Tensor> {
    if !(sigma >= 0.0) {
        return Err(Error::Domain(format!(
            "sigma = {sigma} must be non-negative"
        )));
    }
    x0.zip_map(eps, |x, e| x + sigma * e)
}

/// Preconditioning coefficients of the data-prediction parameterization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Precond {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

impl Precond {
    pub fn new(sigma: f64, sigma_data: f64) -> Self {
        let s2 = sigma * sigma + sigma_data * sigma_data;
        Precond {
            c_skip: sigma_data * sigma_data / s2,
            c_out: sigma * sigma_data / s2.sqrt(),
            c_in: 1.0 / s2.sqrt(),
            c_noise: sigma.ln() / 4.0,
        }
    }
}

/// `c_skip * x_t + c_out * raw`.
pub fn denoiser_precondition(
    raw: &Tensor,
    x_t: &Tensor,
    sigma: f64,
    sigma_data: f64,
) -> Result<Tensor> {
    let p = Precond::new(sigma, sigma_data);
    x_t.zip_map(raw, |x, r| p.c_skip * x + p.c_out * r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_endpoints_and_monotone() {
        let s = NoiseSchedule::default();
        assert_eq!(karras_grid(&s, 2).unwrap(), vec![80.0, 0.002]);
        let g = karras_grid(&s, 52).unwrap();
        assert!(g.windows(2).all(|w| w[0] > w[1]));
        assert!(matches!(karras_grid(&s, 1), Err(Error::Config(_))));
    }

    #[test]
    fn sampling_sigmas_end_at_zero() {
        let s = NoiseSchedule::default();
        assert_eq!(sampling_sigmas(&s, 1).unwrap(), vec![80.0, 0.0]);
        let v = sampling_sigmas(&s, 5).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v[5], 0.0);
    }

    #[test]
    fn perturb_cases() {
        let x = Tensor::from_vec(vec![1.0, -2.0]);
        let e = Tensor::from_vec(vec![0.5, 0.25]);
        assert_eq!(perturb(&x, 0.0, &e).unwrap(), x);
        assert_eq!(
            perturb(&Tensor::zeros(&[2]), 2.0, &e).unwrap().data(),
            &[1.0, 0.5]
        );
        assert!(matches!(perturb(&x, -1.0, &e), Err(Error::Domain(_))));
    }

    #[test]
    fn precondition_limits() {
        let p = Precond::new(0.5, 0.5);
        assert!((p.c_skip - 0.5).abs() < 1e-15);
        assert!((p.c_out - 0.5 / 2f64.sqrt()).abs() < 1e-15);
        let p = Precond::new(1e-9, 0.5);
        assert!((p.c_skip - 1.0).abs() < 1e-15 && p.c_out < 1e-8);
        let x = Tensor::from_vec(vec![2.0, 4.0]);
        let d = denoiser_precondition(&Tensor::zeros(&[2]), &x, 0.5, 0.5).unwrap();
        assert_eq!(d.data(), &[1.0, 2.0]);
    }
}
