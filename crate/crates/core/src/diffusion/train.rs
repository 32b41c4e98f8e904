use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{hybrid_term, pixel_term, FeatureMap, LossBatch, LossConfig};
use super::NoiseSchedule;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};
use crate::unet::{MiniUNet, ParamStore, SkipControl};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over every tensor of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().map(|t| vec![0.0; t.len()]).collect();
        Adam {
            cfg,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Contract(
                "one gradient per parameter required".into(),
            ));
        }
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (i, g) in grads.iter().enumerate() {
            let mut p = params.get(i).clone();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (pv, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gv;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gv * gv;
                *pv -= c.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
            }
            params.set(i, p)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 5000,
            batch_size: 32,
            seed: 0,
            adam: AdamConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

impl TrainReport {
    /// Mean of the last `n` recorded losses.
    pub fn tail_mean(&self, n: usize) -> f64 {
        let k = n.min(self.losses.len()).max(1);
        self.losses[self.losses.len().saturating_sub(k)..]
            .iter()
            .sum::<f64>()
            / k as f64
    }
}

/// Resumable denoising score-matching trainer.
///
/// The objective is the pixel loss, or the hybrid loss when a feature
/// extractor is supplied.
pub struct Trainer {
    cfg: TrainConfig,
    adam: Adam,
    rng: ChaCha8Rng,
    step: usize,
}

pub(crate) fn draw_batch<R: Rng + ?Sized>(data: &Tensor, n: usize, rng: &mut R) -> Tensor {
    let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..data.batch())).collect();
    let parts: Vec<Tensor> = idx.iter().map(|&i| data.slice_batch(i, i + 1)).collect();
    Tensor::stack(&parts).expect("non-empty batch")
}

impl Trainer {
    pub fn new(net: &MiniUNet, cfg: TrainConfig) -> Self {
        let adam = Adam::new(cfg.adam.clone(), net.params());
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Trainer {
            cfg,
            adam,
            rng,
            step: 0,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn run(
        &mut self,
        net: &mut MiniUNet,
        data: &Tensor,
        schedule: &NoiseSchedule,
        features: Option<&dyn FeatureMap>,
        steps: usize,
    ) -> Result<Vec<f64>> {
        if data.batch() == 0 {
            return Err(Error::Config("training set is empty".into()));
        }
        if self.cfg.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let mut losses = Vec::with_capacity(steps);
        for _ in 0..steps {
            let x0 = draw_batch(data, self.cfg.batch_size, &mut self.rng);
            let batch = LossBatch::sample(x0, schedule, &mut self.rng)?;
            let tape = Tape::new();
            let pv = net.params().vars(&tape, true);
            let x_t = tape.constant(batch.noisy());
            let (d, _) = net.forward_var(&pv, &x_t, &batch.sigma, None, SkipControl::Off, false)?;
            let loss = match features {
                Some(f) => hybrid_term(&d, &batch, &self.cfg.loss, Some(f))?,
                None => pixel_term(&d, &batch, &self.cfg.loss)?,
            };
            let lv = loss.value().item()?;
            if !lv.is_finite() {
                return Err(Error::Training {
                    step: self.step,
                    loss: lv,
                });
            }
            let grads = tape.backward(&loss)?;
            let gs: Vec<Tensor> = pv.iter().map(|v| grads.get_or_zeros(v)).collect();
            self.adam.step(net.params_mut(), &gs)?;
            losses.push(lv);
            self.step += 1;
        }
        Ok(losses)
    }
}

pub fn train(
    net: &mut MiniUNet,
    data: &Tensor,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    features: Option<&dyn FeatureMap>,
) -> Result<TrainReport> {
    let mut t = Trainer::new(net, cfg.clone());
    let losses = t.run(net, data, schedule, features, cfg.steps)?;
    Ok(TrainReport { losses })
}
