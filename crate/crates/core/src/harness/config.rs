use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DatasetKind;
use crate::diffusion::{AdamConfig, ClassifierConfig, NoiseSchedule, TrainConfig};
use crate::error::{Error, Result};
use crate::metrics::{KernelKind, KernelSpec, Scalarization};
use crate::samplers::{SamplerConfig, Solver};
use crate::skip_tuning::{ProfileConfig, ScalingMode};
use crate::unet::UNetConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DatasetKind,
    pub n: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            kind: DatasetKind::Shapes,
            n: 4096,
        }
    }
}

/// File locations. Unset entries default to fixed names inside `out_dir`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub out_dir: PathBuf,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub classifier: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            out_dir: PathBuf::from("runs"),
            dataset: None,
            checkpoint: None,
            classifier: None,
        }
    }
}

impl PathsConfig {
    pub fn dataset(&self) -> PathBuf {
        self.dataset
            .clone()
            .unwrap_or_else(|| self.out_dir.join("dataset.bin"))
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir.join("model.ckpt"))
    }

    pub fn classifier(&self) -> PathBuf {
        self.classifier
            .clone()
            .unwrap_or_else(|| self.out_dir.join("classifier.ckpt"))
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

/// Budgets and knobs shared by every measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Generated items per configuration.
    pub n_samples: usize,
    /// Dataset items forming the reference set.
    pub n_reference: usize,
    /// Kernel of the feature-space MMD.
    pub kernel: KernelSpec,
    /// Kernels of the pixel-space and inversion MMD tables.
    pub mmd_kernels: Vec<KernelKind>,
    pub permutations: usize,
    pub loss_batch: usize,
    /// Noise levels of the per-sigma losses; empty means the 5-point
    /// Karras grid.
    pub loss_sigmas: Vec<f64>,
    pub probe_sigma: f64,
    pub probe_batch: usize,
    pub scalarization: Scalarization,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_samples: 4096,
            n_reference: 4096,
            kernel: KernelSpec::new(KernelKind::Rbf),
            mmd_kernels: KernelKind::ALL.to_vec(),
            permutations: 200,
            loss_batch: 256,
            loss_sigmas: Vec::new(),
            probe_sigma: 5.0,
            probe_batch: 16,
            scalarization: Scalarization::OutputSum,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub rho_values: Vec<f64>,
    pub steps: Vec<usize>,
    pub rho_top: f64,
    pub solver: Solver,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            rho_values: (0..=10).map(|i| (50 + 5 * i) as f64 / 100.0).collect(),
            steps: vec![5, 10, 20],
            rho_top: 1.0,
            solver: Solver::Unipc,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowSearchConfig {
    pub rho: f64,
    pub n_windows: usize,
    pub steps_per_window: usize,
    pub solver: Solver,
}

impl Default for WindowSearchConfig {
    fn default() -> Self {
        WindowSearchConfig {
            rho: 0.8,
            n_windows: 13,
            steps_per_window: 4,
            solver: Solver::Unipc,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StochasticConfig {
    pub rho_values: Vec<f64>,
    pub tau_values: Vec<f64>,
    pub steps: usize,
}

impl Default for StochasticConfig {
    fn default() -> Self {
        StochasticConfig {
            rho_values: vec![0.6, 0.7, 0.8, 0.9, 1.0],
            tau_values: vec![0.0, 0.1, 0.2, 0.3, 0.4],
            steps: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneRhoConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Starting coefficient of every layer.
    pub init_rho: f64,
    pub mode: ScalingMode,
}

impl Default for FinetuneRhoConfig {
    fn default() -> Self {
        FinetuneRhoConfig {
            steps: 200,
            batch_size: 32,
            adam: AdamConfig {
                lr: 0.05,
                ..AdamConfig::default()
            },
            init_rho: 0.9,
            mode: ScalingMode::AtConcat,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneFullConfig {
    /// Cumulative training-sample counts at which metrics are taken.
    pub milestones: Vec<usize>,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub hybrid_feature_weight: f64,
}

impl Default for FinetuneFullConfig {
    fn default() -> Self {
        FinetuneFullConfig {
            milestones: vec![0, 2048, 4096],
            batch_size: 32,
            adam: AdamConfig {
                lr: 2e-4,
                ..AdamConfig::default()
            },
            hybrid_feature_weight: 1.0,
        }
    }
}

/// Everything an experiment needs. Serialized as TOML with one table per
/// section; every run writes its resolved copy next to its outputs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed. Component seeds are derived from it by [`Self::resolve`].
    pub seed: u64,
    pub paths: PathsConfig,
    pub data: DataConfig,
    pub model: UNetConfig,
    pub schedule: NoiseSchedule,
    pub train: TrainConfig,
    pub classifier: ClassifierConfig,
    pub sampler: SamplerConfig,
    pub profile: ProfileConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    pub window_search: WindowSearchConfig,
    pub stochastic: StochasticConfig,
    pub finetune_rho: FinetuneRhoConfig,
    pub finetune_full: FinetuneFullConfig,
}

/// Seed offsets of the derived component seeds.
pub mod seeds {
    pub const DATA: u64 = 0;
    pub const TRAIN: u64 = 1;
    pub const CLASSIFIER: u64 = 2;
    pub const SAMPLER: u64 = 3;
    pub const EVAL: u64 = 4;
    pub const MODEL_INIT: u64 = 5;
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Small budgets for smoke runs and tests: the toy network, 1500
    /// training steps and 256 generated items per configuration.
    pub fn smoke() -> Self {
        let mut c = ExperimentConfig::default();
        c.model = UNetConfig::toy();
        c.data.n = 2048;
        c.train.steps = 1500;
        c.eval.n_samples = 256;
        c.eval.n_reference = 1024;
        c.eval.loss_batch = 128;
        c.eval.permutations = 100;
        c
    }

    /// Overwrite component seeds with values derived from `seed`.
    pub fn resolve(mut self) -> Self {
        self.train.seed = self.seed.wrapping_add(seeds::TRAIN);
        self.classifier.seed = self.seed.wrapping_add(seeds::CLASSIFIER);
        self.sampler.seed = self.seed.wrapping_add(seeds::SAMPLER);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.model.validate()?;
        self.sampler.validate()?;
        let e = &self.eval;
        if e.n_samples < 2 || e.n_reference < 2 || e.loss_batch == 0 || e.probe_batch == 0 {
            return Err(Error::Config(
                "evaluation budgets must be positive (>= 2 samples)".into(),
            ));
        }
        if self.sweep.rho_values.is_empty() || self.sweep.steps.is_empty() {
            return Err(Error::Config("sweep grids must be nonempty".into()));
        }
        if self.stochastic.rho_values.is_empty() || self.stochastic.tau_values.is_empty() {
            return Err(Error::Config("stochastic grids must be nonempty".into()));
        }
        if self.finetune_full.milestones.is_empty() {
            return Err(Error::Config(
                "finetune_full needs at least one milestone".into(),
            ));
        }
        Ok(())
    }
}
