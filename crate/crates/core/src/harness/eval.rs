use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::EvalConfig;
use crate::data::Dataset;
use crate::diffusion::{
    karras_grid, loss_feature, loss_pixel, loss_wavelet_bands, Classifier, FeatureMap, HaarBands,
    LossBatch, LossConfig, NoiseSchedule,
};
use crate::error::{Error, Result};
use crate::metrics::{immd, toy_fid, LossValue};
use crate::samplers::{sample, SamplerConfig};
use crate::skip_tuning::SkipProfile;
use crate::tensor::Tensor;
use crate::unet::MiniUNet;

/// Items integrated together; each chunk draws its noise from its own seed.
pub const SAMPLE_CHUNK: usize = 256;

/// Seed of chunk `c` for a sampler seeded with `seed`.
pub fn chunk_seed(seed: u64, c: usize) -> u64 {
    seed ^ (c as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Generate `n` items in chunks of [`SAMPLE_CHUNK`]. Chunks run in parallel
/// and are stitched in order, so the result does not depend on scheduling.
pub fn generate(
    net: &MiniUNet,
    cfg: &SamplerConfig,
    schedule: &NoiseSchedule,
    profile: Option<&SkipProfile>,
    n: usize,
) -> Result<Tensor> {
    let c = net.config();
    let item = [c.input_channels, c.image_size, c.image_size];
    let chunks: Vec<(usize, usize)> = (0..n.div_ceil(SAMPLE_CHUNK))
        .map(|i| (i, SAMPLE_CHUNK.min(n - i * SAMPLE_CHUNK)))
        .collect();
    let parts = chunks
        .par_iter()
        .map(|&(i, len)| {
            let mut ci = cfg.clone();
            ci.seed = chunk_seed(cfg.seed, i);
            Ok(sample(net, &ci, schedule, profile, &item, len)?.output)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&parts)
}

/// Classifier features of a batch, in chunks.
pub fn features_of(classifier: &Classifier, x: &Tensor) -> Result<Tensor> {
    let parts = (0..x.batch().div_ceil(SAMPLE_CHUNK))
        .map(|i| {
            classifier.features_of(
                &x.slice_batch(i * SAMPLE_CHUNK, x.batch().min((i + 1) * SAMPLE_CHUNK)),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&parts)
}

/// Sample quality of one configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleScores {
    pub toy_fid: f64,
    pub immd: f64,
}

/// Frozen model, classifier and reference statistics shared by the
/// configurations of one experiment.
pub struct Evaluator<'a> {
    pub net: &'a MiniUNet,
    pub classifier: &'a Classifier,
    pub schedule: NoiseSchedule,
    pub cfg: EvalConfig,
    pub loss_cfg: LossConfig,
    reference: Tensor,
    reference_features: Tensor,
    loss_batch: LossBatch,
    seed: u64,
}

impl<'a> Evaluator<'a> {
    pub fn new(
        net: &'a MiniUNet,
        classifier: &'a Classifier,
        schedule: NoiseSchedule,
        cfg: EvalConfig,
        loss_cfg: LossConfig,
        data: &Dataset,
        seed: u64,
    ) -> Result<Self> {
        let n_ref = cfg.n_reference.min(data.len());
        if n_ref < 2 {
            return Err(Error::Config("reference set needs at least 2 items".into()));
        }
        let reference = data.images.slice_batch(0, n_ref);
        let reference_features = features_of(classifier, &reference)?;
        let nb = cfg.loss_batch.min(data.len());
        let x0 = data.images.slice_batch(data.len() - nb, data.len());
        let loss_batch = LossBatch::sample(x0, &schedule, &mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok(Evaluator {
            net,
            classifier,
            schedule,
            cfg,
            loss_cfg,
            reference,
            reference_features,
            loss_batch,
            seed,
        })
    }

    pub fn reference(&self) -> &Tensor {
        &self.reference
    }

    pub fn generate(
        &self,
        sampler: &SamplerConfig,
        profile: Option<&SkipProfile>,
    ) -> Result<Tensor> {
        generate(
            self.net,
            sampler,
            &self.schedule,
            profile,
            self.cfg.n_samples,
        )
    }

    pub fn score(&self, samples: &Tensor) -> Result<SampleScores> {
        let f = features_of(self.classifier, samples)?;
        Ok(SampleScores {
            toy_fid: toy_fid(&f, &self.reference_features)?,
            immd: immd(&f, &self.reference_features, &self.cfg.kernel)?,
        })
    }

    pub fn sample_and_score(
        &self,
        sampler: &SamplerConfig,
        profile: Option<&SkipProfile>,
    ) -> Result<SampleScores> {
        self.score(&self.generate(sampler, profile)?)
    }

    /// Pixel and feature losses on the fixed evaluation batch.
    pub fn losses(&self, profile: Option<&SkipProfile>) -> Result<(f64, f64)> {
        let f: &dyn FeatureMap = self.classifier;
        Ok((
            loss_pixel(self.net, &self.loss_batch, &self.loss_cfg, profile)?,
            loss_feature(self.net, &self.loss_batch, &self.loss_cfg, Some(f), profile)?,
        ))
    }

    pub fn loss_sigmas(&self) -> Result<Vec<f64>> {
        if self.cfg.loss_sigmas.is_empty() {
            karras_grid(&self.schedule, 5)
        } else {
            Ok(self.cfg.loss_sigmas.clone())
        }
    }

    /// Pixel, feature and wavelet-band losses at each configured noise level.
    pub fn per_sigma_losses(&self, profile: Option<&SkipProfile>) -> Result<Vec<LossValue>> {
        let f: &dyn FeatureMap = self.classifier;
        let mut out = Vec::new();
        for (i, s) in self.loss_sigmas()?.into_iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(1 + i as u64));
            let b = LossBatch::at_sigma(self.loss_batch.x0.clone(), s, &mut rng)?;
            let entry = |space: &str, value: f64| LossValue {
                space: space.into(),
                sigma: Some(s),
                value,
            };
            out.push(entry(
                "pixel",
                loss_pixel(self.net, &b, &self.loss_cfg, profile)?,
            ));
            out.push(entry(
                "feature",
                loss_feature(self.net, &b, &self.loss_cfg, Some(f), profile)?,
            ));
            let bands: HaarBands = loss_wavelet_bands(self.net, &b, profile)?;
            for (name, v) in HaarBands::NAMES.iter().zip(bands.as_array()) {
                out.push(entry(&format!("wavelet_{name}"), v));
            }
        }
        Ok(out)
    }
}
