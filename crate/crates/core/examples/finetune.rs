//! Learn the skip coefficients of a frozen network against the feature
//! loss, then compare with fine-tuning every weight.
//!
//! `cargo run --release --example finetune [out_dir]`
use skiptune::harness::{
    finetune_full, finetune_rho, run, ExperimentConfig, ExperimentKind, ExperimentSpec,
};

fn main() -> skiptune::Result<()> {
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "runs/example_finetune".into());
    let mut cfg = ExperimentConfig::smoke();
    cfg.paths.out_dir = out.into();
    cfg.train.steps = 800;
    cfg.finetune_rho.steps = 60;
    cfg.finetune_full.milestones = vec![0, 512, 1024];
    for kind in [
        ExperimentKind::GenData,
        ExperimentKind::Train,
        ExperimentKind::TrainClassifier,
    ] {
        run(&ExperimentSpec::new(kind, cfg.clone()))?;
    }
    let cfg = cfg.resolve();
    let (_, rows) = finetune_rho(&cfg)?;
    for r in &rows {
        let rho: Vec<String> = r.rho.iter().map(|v| format!("{v:.3}")).collect();
        let div = r
            .diverged_at
            .map_or(String::new(), |s| format!(" (stopped at step {s})"));
        println!(
            "{:>13} {:>6}: toy_fid {:.4} rho [{}]{div}",
            r.variant.name(),
            r.phase,
            r.toy_fid,
            rho.join(", ")
        );
    }
    let (_, rows) = finetune_full(&cfg)?;
    for r in &rows {
        println!(
            "full, {:>5} samples: toy_fid {:.4} feature loss {:.4}",
            r.samples_seen, r.toy_fid, r.loss_feature
        );
    }
    Ok(())
}
