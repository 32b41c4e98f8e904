//! End-to-end sweep on the toy problem: generate data, train the network
//! and the feature extractor, then score samples across skip coefficients.
//!
//! `cargo run --release --example rho_sweep [out_dir]`
use skiptune::harness::{run, run_rho_sweep, ExperimentConfig, ExperimentKind, ExperimentSpec};

fn main() -> skiptune::Result<()> {
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "runs/example_sweep".into());
    let mut cfg = ExperimentConfig::smoke();
    cfg.paths.out_dir = out.into();
    cfg.train.steps = 800;
    cfg.sweep.rho_values = vec![0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
    cfg.sweep.steps = vec![10];
    for kind in [
        ExperimentKind::GenData,
        ExperimentKind::Train,
        ExperimentKind::TrainClassifier,
    ] {
        let r = run(&ExperimentSpec::new(kind, cfg.clone()))?;
        println!("{} done in {:.1}s", kind.name(), r.wall_clock_seconds);
    }
    let (_, rows) = run_rho_sweep(&ExperimentSpec::new(ExperimentKind::RhoSweep, cfg).config)?;
    println!(
        "{:>6} {:>5} {:>10} {:>10} {:>10}",
        "rho", "nfe", "toy_fid", "immd", "pixel"
    );
    for r in rows {
        println!(
            "{:>6.2} {:>5} {:>10.4} {:>10.3e} {:>10.4}",
            r.rho_bottom, r.nfe, r.toy_fid, r.immd, r.loss_pixel
        );
    }
    Ok(())
}
