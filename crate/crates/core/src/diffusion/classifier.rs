//! Small convolutional classifier whose penultimate activations serve as
//! the feature space for feature losses, Frechet distance and feature MMD.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::loss::FeatureMap;
use super::train::{Adam, AdamConfig};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use crate::unet::{Checkpoint, ParamStore};

pub const CLASSIFIER_CHECKPOINT_KIND: &str = "classifier";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub input_channels: usize,
    pub image_size: usize,
    pub channels1: usize,
    pub channels2: usize,
    pub num_classes: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Fraction of the labeled set held out for the accuracy check.
    pub holdout_fraction: f64,
    /// Held-out accuracy below this fails training.
    pub min_accuracy: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            input_channels: 1,
            image_size: 8,
            channels1: 8,
            channels2: 16,
            num_classes: 4,
            steps: 600,
            batch_size: 64,
            seed: 0,
            adam: AdamConfig {
                lr: 3e-3,
                ..AdamConfig::default()
            },
            holdout_fraction: 0.2,
            min_accuracy: 0.9,
        }
    }
}

impl ClassifierConfig {
    pub fn feature_dim(&self) -> usize {
        let s = self.image_size / 4;
        self.channels2 * s * s
    }
}

/// conv3x3 -> silu -> pool -> conv3x3 -> silu -> pool -> [features] -> linear.
#[derive(Clone, Debug)]
pub struct Classifier {
    config: ClassifierConfig,
    params: ParamStore,
}

const W1: usize = 0;
const B1: usize = 1;
const W2: usize = 2;
const B2: usize = 3;
const WF: usize = 4;
const BF: usize = 5;

impl Classifier {
    pub fn new(config: ClassifierConfig, seed: u64) -> Result<Self> {
        if !config.image_size.is_multiple_of(4) || config.num_classes < 2 {
            return Err(Error::Config(
                "classifier needs image_size divisible by 4 and >= 2 classes".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |shape: &[usize], fan_in: usize| {
            let d = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("std");
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| d.sample(&mut rng)).collect()).expect("shape")
        };
        let c = &config;
        let mut p = ParamStore::new();
        p.push(
            "conv1.w",
            normal(&[c.channels1, c.input_channels, 3, 3], c.input_channels * 9),
        );
        p.push("conv1.b", Tensor::zeros(&[c.channels1]));
        p.push(
            "conv2.w",
            normal(&[c.channels2, c.channels1, 3, 3], c.channels1 * 9),
        );
        p.push("conv2.b", Tensor::zeros(&[c.channels2]));
        p.push(
            "fc.w",
            normal(&[c.num_classes, c.feature_dim()], c.feature_dim()),
        );
        p.push("fc.b", Tensor::zeros(&[c.num_classes]));
        Ok(Classifier { config, params: p })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    fn features_with<'t>(&self, pv: &[Var<'t>], x: &Var<'t>) -> Result<Var<'t>> {
        let b = x.value().batch();
        x.conv2d(&pv[W1], Some(&pv[B1]), 1)?
            .silu()
            .avg_pool2()?
            .conv2d(&pv[W2], Some(&pv[B2]), 1)?
            .silu()
            .avg_pool2()?
            .reshape(&[b, self.config.feature_dim()])
    }

    fn logits_with<'t>(&self, pv: &[Var<'t>], x: &Var<'t>) -> Result<Var<'t>> {
        self.features_with(pv, x)?.linear(&pv[WF], Some(&pv[BF]))
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let tape = Tape::inference();
        let pv = self.params.vars(&tape, false);
        let logits = self.logits_with(&pv, &tape.constant(x.clone()))?;
        let k = self.config.num_classes;
        Ok(logits
            .value()
            .data()
            .chunks(k)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                        if v > best.1 {
                            (i, v)
                        } else {
                            best
                        }
                    })
                    .0
            })
            .collect())
    }

    pub fn accuracy(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        let pred = self.predict(x)?;
        let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
        Ok(hits as f64 / labels.len().max(1) as f64)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            kind: CLASSIFIER_CHECKPOINT_KIND.into(),
            config: toml::to_string(&self.config)?,
            params: self.params.clone(),
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.kind != CLASSIFIER_CHECKPOINT_KIND {
            return Err(Error::Format(format!(
                "expected a classifier checkpoint, got {}",
                ck.kind
            )));
        }
        let config: ClassifierConfig = toml::from_str(&ck.config)?;
        let reference = Self::new(config.clone(), 0)?;
        if !reference.params.same_layout(&ck.params) {
            return Err(Error::Format(
                "classifier parameters do not match the config".into(),
            ));
        }
        Ok(Classifier {
            config,
            params: ck.params,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}

impl FeatureMap for Classifier {
    fn features<'t>(&self, x: &Var<'t>) -> Result<Var<'t>> {
        let pv = self.params.vars(x.tape(), false);
        self.features_with(&pv, x)
    }
}

fn gather(x: &Tensor, idx: &[usize]) -> Tensor {
    let parts: Vec<Tensor> = idx.iter().map(|&i| x.slice_batch(i, i + 1)).collect();
    Tensor::stack(&parts).expect("non-empty")
}

/// Train on a random split and report held-out accuracy. Fails with a
/// numerical error when accuracy stays below `min_accuracy`.
pub fn train_classifier(
    images: &Tensor,
    labels: &[usize],
    cfg: &ClassifierConfig,
) -> Result<(Classifier, f64)> {
    let n = images.batch();
    if n < 2 || labels.len() != n {
        return Err(Error::Config(
            "classifier needs at least 2 labeled items".into(),
        ));
    }
    if labels.iter().any(|&l| l >= cfg.num_classes) {
        return Err(Error::Config("label out of range for num_classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_hold = ((n as f64 * cfg.holdout_fraction).round() as usize).clamp(1, n - 1);
    let (hold, train_idx) = order.split_at(n_hold);

    let mut net = Classifier::new(cfg.clone(), cfg.seed)?;
    let mut adam = Adam::new(cfg.adam.clone(), &net.params);
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch_size)
            .map(|_| *train_idx.choose(&mut rng).expect("train split"))
            .collect();
        let xb = gather(images, &idx);
        let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let tape = Tape::new();
        let pv = net.params.vars(&tape, true);
        let loss = net
            .logits_with(&pv, &tape.constant(xb))?
            .cross_entropy(&yb)?;
        let lv = loss.value().item()?;
        if !lv.is_finite() {
            return Err(Error::Training { step, loss: lv });
        }
        let grads = tape.backward(&loss)?;
        let gs: Vec<Tensor> = pv.iter().map(|v| grads.get_or_zeros(v)).collect();
        adam.step(&mut net.params, &gs)?;
    }
    let xh = gather(images, hold);
    let yh: Vec<usize> = hold.iter().map(|&i| labels[i]).collect();
    let acc = net.accuracy(&xh, &yh)?;
    if acc < cfg.min_accuracy {
        return Err(Error::Numerical(format!(
            "classifier held-out accuracy {acc:.3} below required {:.3}",
            cfg.min_accuracy
        )));
    }
    Ok((net, acc))
}
