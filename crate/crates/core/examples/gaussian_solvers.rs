//! Convergence of the ODE solvers on Gaussian data, where the flow is known
//! in closed form.
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use skiptune::diffusion::{GaussianDenoiser, NoiseSchedule};
use skiptune::samplers::{sample_ode_from, SamplerConfig, Solver};
use skiptune::Tensor;

fn main() -> skiptune::Result<()> {
    let s = NoiseSchedule::default();
    let g = GaussianDenoiser::new(0.25)?;
    let z = Tensor::randn(&[64, 4], &mut ChaCha8Rng::seed_from_u64(3));
    let exact = g.flow(&z.scale(s.sigma_max), s.sigma_max, 0.0);
    println!(
        "{:>6} {:>12} {:>12} {:>12} {:>12}",
        "N", "euler", "heun", "unipc-2", "unipc-3"
    );
    for n in [8, 16, 32, 64, 128] {
        let mut row = format!("{n:>6}");
        for (solver, order) in [
            (Solver::Euler, 2),
            (Solver::Heun, 2),
            (Solver::Unipc, 2),
            (Solver::Unipc, 3),
        ] {
            let cfg = SamplerConfig {
                unipc_order: order,
                ..SamplerConfig::new(solver, n)
            };
            let out = sample_ode_from(&g, &cfg, &s, None, &z)?.output;
            let err = out.sub(&exact)?.l2_norm() / exact.l2_norm();
            row += &format!(" {err:>12.3e}");
        }
        println!("{row}");
    }
    Ok(())
}
