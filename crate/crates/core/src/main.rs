use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use skiptune::harness::{run, ExperimentConfig, ExperimentKind, ExperimentSpec};

#[derive(Parser)]
#[command(
    name = "skiptune",
    version,
    about = "Skip-connection scaling experiments on a toy diffusion model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Model checkpoint to read.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Start from the small smoke-test budgets instead of the defaults.
    #[arg(long, global = true)]
    smoke: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    GenData,
    Train,
    TrainClassifier,
    Sample,
    Invert,
    SweepRho,
    WindowSearch,
    StochasticGrid,
    FinetuneRho,
    FinetuneFull,
    Metrics,
    MmdTest,
}

impl Command {
    fn kind(self) -> ExperimentKind {
        match self {
            Command::GenData => ExperimentKind::GenData,
            Command::Train => ExperimentKind::Train,
            Command::TrainClassifier => ExperimentKind::TrainClassifier,
            Command::Sample => ExperimentKind::Sample,
            Command::Invert => ExperimentKind::Invert,
            Command::SweepRho => ExperimentKind::RhoSweep,
            Command::WindowSearch => ExperimentKind::WindowSearch,
            Command::StochasticGrid => ExperimentKind::StochasticGrid,
            Command::FinetuneRho => ExperimentKind::FinetuneRho,
            Command::FinetuneFull => ExperimentKind::FinetuneFull,
            Command::Metrics => ExperimentKind::MetricsReport,
            Command::MmdTest => ExperimentKind::MmdTest,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(cli: &Cli) -> skiptune::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None if cli.smoke => ExperimentConfig::smoke(),
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.paths.out_dir = o.clone();
    }
    if let Some(c) = &cli.checkpoint {
        cfg.paths.checkpoint = Some(c.clone());
    }
    let spec = ExperimentSpec::new(cli.command.kind(), cfg);
    let record = run(&spec)?;
    println!(
        "{} done in {:.1}s (seed {})",
        record.kind.name(),
        record.wall_clock_seconds,
        record.seed
    );
    println!("spec   {}", record.spec_hash);
    if let Some(h) = &record.checkpoint_hash {
        println!("model  {h}");
    }
    for o in &record.outputs {
        println!("wrote  {}", o.display());
    }
    for r in &record.reports {
        println!("[{}]\n{}", r.label, r.report.to_text());
    }
    Ok(())
}
