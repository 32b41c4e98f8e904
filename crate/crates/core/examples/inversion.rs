//! Invert data to noise with the probability-flow ODE and map it back.
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use skiptune::diffusion::{GaussianDenoiser, NoiseSchedule};
use skiptune::metrics::{mmd_unbiased, KernelKind, KernelSpec};
use skiptune::samplers::{invert, sample_ode_from, SamplerConfig, Solver};
use skiptune::Tensor;

fn main() -> skiptune::Result<()> {
    let s = NoiseSchedule::default();
    let g = GaussianDenoiser::new(0.25)?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x0 = Tensor::randn(&[256, 8], &mut rng).scale(0.5);
    let gauss = Tensor::randn(&[256, 8], &mut rng);
    for (solver, n) in [
        (Solver::Euler, 50),
        (Solver::Heun, 50),
        (Solver::Unipc, 50),
        (Solver::Unipc, 200),
    ] {
        let cfg = SamplerConfig::new(solver, n);
        let inv = invert(&g, &cfg, &s, None, &x0)?;
        let back = sample_ode_from(&g, &cfg, &s, None, &inv.output)?.output;
        let err = back.sub(&x0)?.l2_norm() / x0.l2_norm();
        let mmd = mmd_unbiased(&inv.output, &gauss, &KernelSpec::new(KernelKind::Rbf))?;
        println!(
            "{solver:?} N={n}: nfe {} round-trip rel err {err:.2e}, MMD to N(0, I) {mmd:.2e}",
            inv.nfe
        );
    }
    Ok(())
}
