//! Experiment orchestration: configuration, grid experiments, fine-tuning
//! and persisted run records.
//!
//! Every output is a function of the resolved configuration, the input
//! file bytes and the seed. Grid points run as independent jobs and are
//! merged in grid order.

mod config;
mod eval;
mod experiments;
mod finetune;

pub use config::{
    seeds, DataConfig, EvalConfig, ExperimentConfig, FinetuneFullConfig, FinetuneRhoConfig,
    PathsConfig, StochasticConfig, SweepConfig, WindowSearchConfig,
};
pub use eval::{chunk_seed, features_of, generate, Evaluator, SampleScores, SAMPLE_CHUNK};
pub use experiments::{
    gen_data, invert_dataset, metrics_report, mmd_test, run_rho_sweep, run_stochastic_grid,
    run_window_search, sample_to_file, train_classifier_run, train_model, MmdRow, RhoSweepRow,
    StochasticRow, WindowRow,
};
pub use finetune::{
    finetune_full, finetune_rho, rho_objective, FinetuneFullRow, FinetuneRhoRow, RhoVariant,
    RHO_CHECKPOINT_KIND,
};

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::MetricReport;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    GenData,
    Train,
    TrainClassifier,
    Sample,
    Invert,
    RhoSweep,
    WindowSearch,
    StochasticGrid,
    FinetuneRho,
    FinetuneFull,
    MetricsReport,
    MmdTest,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::GenData => "gen_data",
            ExperimentKind::Train => "train",
            ExperimentKind::TrainClassifier => "train_classifier",
            ExperimentKind::Sample => "sample",
            ExperimentKind::Invert => "invert",
            ExperimentKind::RhoSweep => "rho_sweep",
            ExperimentKind::WindowSearch => "window_search",
            ExperimentKind::StochasticGrid => "stochastic_grid",
            ExperimentKind::FinetuneRho => "finetune_rho",
            ExperimentKind::FinetuneFull => "finetune_full",
            ExperimentKind::MetricsReport => "metrics_report",
            ExperimentKind::MmdTest => "mmd_test",
        }
    }

    /// Input files that must exist before the run starts.
    fn inputs(self, cfg: &ExperimentConfig) -> Vec<(&'static str, PathBuf)> {
        let p = &cfg.paths;
        use ExperimentKind::*;
        match self {
            GenData => vec![],
            Train | TrainClassifier => vec![("dataset", p.dataset())],
            Sample => vec![("checkpoint", p.checkpoint())],
            Invert => vec![("checkpoint", p.checkpoint()), ("dataset", p.dataset())],
            MmdTest => vec![("checkpoint", p.checkpoint()), ("dataset", p.dataset())],
            RhoSweep | WindowSearch | StochasticGrid | FinetuneRho | FinetuneFull
            | MetricsReport => vec![
                ("checkpoint", p.checkpoint()),
                ("dataset", p.dataset()),
                ("classifier", p.classifier()),
            ],
        }
    }

    /// Whether the model checkpoint is an input of this kind.
    fn reads_checkpoint(self) -> bool {
        self.inputs(&ExperimentConfig::default())
            .iter()
            .any(|(w, _)| *w == "checkpoint")
    }
}

/// One experiment: what to run and the resolved configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub config: ExperimentConfig,
}

impl ExperimentSpec {
    /// Resolves derived seeds.
    pub fn new(kind: ExperimentKind, config: ExperimentConfig) -> Self {
        ExperimentSpec {
            kind,
            config: config.resolve(),
        }
    }

    /// SHA-256 of the kind and the canonical TOML of the configuration.
    pub fn hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.kind.name().as_bytes());
        h.update(b"\n");
        h.update(self.config.to_toml()?.as_bytes());
        Ok(hex(&h.finalize()))
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        for (what, path) in self.kind.inputs(&self.config) {
            if !path.exists() {
                return Err(Error::Config(format!(
                    "missing {what}: {} does not exist",
                    path.display()
                )));
            }
        }
        Ok(())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Git-style content hash: SHA-256 over `blob <len>\0` followed by the bytes.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex(&h.finalize())
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(content_hash(&std::fs::read(path)?))
}

/// A labelled report of one configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledReport {
    pub label: String,
    pub report: MetricReport,
}

/// Provenance and results of one run. The serialized part is written to
/// `<kind>.run.toml` in the output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub kind: ExperimentKind,
    pub spec_hash: String,
    pub checkpoint_hash: Option<String>,
    pub seed: u64,
    /// The only field that is not a function of the inputs.
    pub wall_clock_seconds: f64,
    pub csv: Option<PathBuf>,
    pub outputs: Vec<PathBuf>,
    #[serde(skip)]
    pub reports: Vec<LabeledReport>,
}

impl RunRecord {
    pub fn record_path(out_dir: &Path, kind: ExperimentKind) -> PathBuf {
        out_dir.join(format!("{}.run.toml", kind.name()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(toml::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Files and reports produced by one experiment body.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Outcome {
    pub csv: Option<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub reports: Vec<LabeledReport>,
}

/// Validate, execute and record one experiment.
pub fn run(spec: &ExperimentSpec) -> Result<RunRecord> {
    spec.validate()?;
    let cfg = &spec.config;
    let out_dir = &cfg.paths.out_dir;
    std::fs::create_dir_all(out_dir)?;
    let spec_hash = spec.hash()?;
    let resolved = out_dir.join(format!("{}.config.toml", spec.kind.name()));
    std::fs::write(&resolved, cfg.to_toml()?)?;
    let checkpoint_hash = if spec.kind.reads_checkpoint() {
        Some(file_hash(&cfg.paths.checkpoint())?)
    } else {
        None
    };

    let start = Instant::now();
    let outcome = match spec.kind {
        ExperimentKind::GenData => gen_data(cfg)?,
        ExperimentKind::Train => train_model(cfg)?,
        ExperimentKind::TrainClassifier => train_classifier_run(cfg)?,
        ExperimentKind::Sample => sample_to_file(cfg)?,
        ExperimentKind::Invert => invert_dataset(cfg)?,
        ExperimentKind::RhoSweep => run_rho_sweep(cfg)?.0,
        ExperimentKind::WindowSearch => run_window_search(cfg)?.0,
        ExperimentKind::StochasticGrid => run_stochastic_grid(cfg)?.0,
        ExperimentKind::FinetuneRho => finetune_rho(cfg)?.0,
        ExperimentKind::FinetuneFull => finetune_full(cfg)?.0,
        ExperimentKind::MetricsReport => metrics_report(cfg)?.0,
        ExperimentKind::MmdTest => mmd_test(cfg)?.0,
    };
    let mut outputs = vec![resolved];
    outputs.extend(outcome.outputs);
    let record = RunRecord {
        kind: spec.kind,
        spec_hash,
        checkpoint_hash,
        seed: cfg.seed,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        csv: outcome.csv,
        outputs,
        reports: outcome.reports,
    };
    std::fs::write(
        RunRecord::record_path(out_dir, spec.kind),
        toml::to_string(&record)?,
    )?;
    Ok(record)
}
