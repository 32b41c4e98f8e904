use rand::Rng;
use serde::{Deserialize, Serialize};

use super::wavelet::{haar2d, HaarBands};
use super::NoiseSchedule;
use crate::error::{Error, Result};
use crate::skip_tuning::SkipProfile;
use crate::tensor::{Tape, Tensor, Var};
use crate::unet::Denoiser;

/// Per-sigma loss weight `omega`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Uniform,
    /// `(sigma^2 + sigma_data^2) / (sigma * sigma_data)^2`.
    #[default]
    Edm,
}

impl Weighting {
    pub fn weight(self, sigma: f64, sigma_data: f64) -> f64 {
        match self {
            Weighting::Uniform => 1.0,
            Weighting::Edm => {
                let sd = sigma * sigma_data;
                (sigma * sigma + sigma_data * sigma_data) / (sd * sd)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub weighting: Weighting,
    pub sigma_data: f64,
    pub hybrid_feature_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            weighting: Weighting::Edm,
            sigma_data: 0.5,
            hybrid_feature_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn uniform() -> Self {
        LossConfig {
            weighting: Weighting::Uniform,
            ..Self::default()
        }
    }
}

/// A differentiable map from images `[B, ...]` to features `[B, F]`.
pub trait FeatureMap: Sync {
    fn features<'t>(&self, x: &Var<'t>) -> Result<Var<'t>>;

    fn features_of(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::inference();
        Ok(self.features(&tape.constant(x.clone()))?.to_tensor())
    }
}

/// Flattens each item.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityFeatures;

impl FeatureMap for IdentityFeatures {
    fn features<'t>(&self, x: &Var<'t>) -> Result<Var<'t>> {
        let b = x.value().batch();
        x.reshape(&[b, x.value().item_len()])
    }
}

/// `f(x) = A x` on flattened items, `A` of shape `[F, D]`.
#[derive(Clone, Debug)]
pub struct LinearFeatures {
    pub a: Tensor,
}

impl FeatureMap for LinearFeatures {
    fn features<'t>(&self, x: &Var<'t>) -> Result<Var<'t>> {
        let b = x.value().batch();
        x.reshape(&[b, x.value().item_len()])?
            .linear(&x.tape().constant(self.a.clone()), None)
    }
}

/// Clean data, per-item noise levels and the noise draw.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBatch {
    pub x0: Tensor,
    pub sigma: Vec<f64>,
    pub eps: Tensor,
}

impl LossBatch {
    pub fn new(x0: Tensor, sigma: Vec<f64>, eps: Tensor) -> Result<Self> {
        if x0.batch() == 0 {
            return Err(Error::Dimension("loss batch is empty".into()));
        }
        if sigma.len() != x0.batch() || eps.shape() != x0.shape() {
            return Err(Error::Dimension(
                "sigma and eps must match the batch".into(),
            ));
        }
        if let Some(s) = sigma.iter().find(|s| !(**s > 0.0)) {
            return Err(Error::Domain(format!("sigma = {s} must be positive")));
        }
        Ok(LossBatch { x0, sigma, eps })
    }

    /// Log-uniform sigma per item.
    pub fn sample<R: Rng + ?Sized>(
        x0: Tensor,
        schedule: &NoiseSchedule,
        rng: &mut R,
    ) -> Result<Self> {
        let sigma = (0..x0.batch())
            .map(|_| schedule.sample_sigma(rng))
            .collect();
        let eps = Tensor::randn(x0.shape(), rng);
        Self::new(x0, sigma, eps)
    }

    /// Every item at the same noise level.
    pub fn at_sigma<R: Rng + ?Sized>(x0: Tensor, sigma: f64, rng: &mut R) -> Result<Self> {
        let eps = Tensor::randn(x0.shape(), rng);
        Self::new(x0.clone(), vec![sigma; x0.batch()], eps)
    }

    pub fn noisy(&self) -> Tensor {
        let n = self.x0.item_len();
        let mut out = self.x0.clone();
        for (b, s) in self.sigma.iter().enumerate() {
            let e = &self.eps.data()[b * n..(b + 1) * n];
            for (v, ev) in out.data_mut()[b * n..(b + 1) * n].iter_mut().zip(e) {
                *v += s * ev;
            }
        }
        out
    }

    pub fn weights(&self, cfg: &LossConfig) -> Vec<f64> {
        self.sigma
            .iter()
            .map(|&s| cfg.weighting.weight(s, cfg.sigma_data))
            .collect()
    }
}

/// `mean_b omega_b ||D_b - x0_b||^2` on a tape.
pub fn pixel_term<'t>(denoised: &Var<'t>, batch: &LossBatch, cfg: &LossConfig) -> Result<Var<'t>> {
    let x0 = denoised.tape().constant(batch.x0.clone());
    denoised.sub(&x0)?.weighted_sq_mean(&batch.weights(cfg))
}

/// `mean_b omega_b ||f(D_b) - f(x0_b)||^2` on a tape.
pub fn feature_term<'t>(
    denoised: &Var<'t>,
    batch: &LossBatch,
    cfg: &LossConfig,
    f: &dyn FeatureMap,
) -> Result<Var<'t>> {
    let x0 = denoised.tape().constant(batch.x0.clone());
    f.features(denoised)?
        .sub(&f.features(&x0)?)?
        .weighted_sq_mean(&batch.weights(cfg))
}

/// Pixel term plus `hybrid_feature_weight` times the feature term. A zero
/// weight needs no extractor and returns the pixel term unchanged.
pub fn hybrid_term<'t>(
    denoised: &Var<'t>,
    batch: &LossBatch,
    cfg: &LossConfig,
    f: Option<&dyn FeatureMap>,
) -> Result<Var<'t>> {
    let pixel = pixel_term(denoised, batch, cfg)?;
    if cfg.hybrid_feature_weight == 0.0 {
        return Ok(pixel);
    }
    let f = f.ok_or_else(|| Error::Config("hybrid loss needs a feature extractor".into()))?;
    pixel.add(&feature_term(denoised, batch, cfg, f)?.mul_scalar(cfg.hybrid_feature_weight))
}

fn denoised_const<'t>(
    tape: &'t Tape,
    net: &dyn Denoiser,
    batch: &LossBatch,
    profile: Option<&SkipProfile>,
) -> Result<Var<'t>> {
    Ok(tape.constant(net.denoise_each(&batch.noisy(), &batch.sigma, profile)?))
}

pub fn loss_pixel(
    net: &dyn Denoiser,
    batch: &LossBatch,
    cfg: &LossConfig,
    profile: Option<&SkipProfile>,
) -> Result<f64> {
    let tape = Tape::inference();
    pixel_term(&denoised_const(&tape, net, batch, profile)?, batch, cfg)?
        .value()
        .item()
}

pub fn loss_feature(
    net: &dyn Denoiser,
    batch: &LossBatch,
    cfg: &LossConfig,
    f: Option<&dyn FeatureMap>,
    profile: Option<&SkipProfile>,
) -> Result<f64> {
    let f = f.ok_or_else(|| Error::Config("feature loss needs a feature extractor".into()))?;
    let tape = Tape::inference();
    feature_term(&denoised_const(&tape, net, batch, profile)?, batch, cfg, f)?
        .value()
        .item()
}

pub fn loss_hybrid(
    net: &dyn Denoiser,
    batch: &LossBatch,
    cfg: &LossConfig,
    f: Option<&dyn FeatureMap>,
    profile: Option<&SkipProfile>,
) -> Result<f64> {
    let tape = Tape::inference();
    hybrid_term(&denoised_const(&tape, net, batch, profile)?, batch, cfg, f)?
        .value()
        .item()
}

/// Per-band mean squared Haar coefficients of the residual `D - x0`,
/// unweighted. Multiply by [`wavelet_coefficients_per_band`] to recover
/// sums; the four sums add up to the pixel-space squared error.
pub fn loss_wavelet_bands(
    net: &dyn Denoiser,
    batch: &LossBatch,
    profile: Option<&SkipProfile>,
) -> Result<HaarBands> {
    let d = net.denoise_each(&batch.noisy(), &batch.sigma, profile)?;
    residual_bands(&d.sub(&batch.x0)?)
}

/// Per-band mean squares of a residual tensor `[B, C, H, W]`.
pub fn residual_bands(residual: &Tensor) -> Result<HaarBands> {
    let [ll, lh, hl, hh] = haar2d(residual)?;
    let n = ll.len() as f64;
    Ok(HaarBands {
        ll: ll.sq_norm() / n,
        lh: lh.sq_norm() / n,
        hl: hl.sq_norm() / n,
        hh: hh.sq_norm() / n,
    })
}

pub fn wavelet_coefficients_per_band(shape: &[usize]) -> usize {
    shape.iter().product::<usize>() / 4
}
