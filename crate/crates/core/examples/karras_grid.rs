//! Noise levels visited by the samplers.
use skiptune::diffusion::{karras_grid, sampling_sigmas, NoiseSchedule};
use skiptune::samplers::{SamplerConfig, Solver};

fn main() -> skiptune::Result<()> {
    let s = NoiseSchedule::default();
    let g = karras_grid(&s, 5)?;
    println!(
        "karras(5): {}",
        g.iter()
            .map(|v| format!("{v:.4}"))
            .collect::<Vec<_>>()
            .join(", ")
    );
    println!("sampler grid (N=5): {:?}", sampling_sigmas(&s, 5)?);
    for solver in [Solver::Euler, Solver::Heun, Solver::Unipc] {
        for n in [5, 10, 20] {
            println!(
                "{solver:?} N={n}: {} denoiser calls",
                SamplerConfig::new(solver, n).nfe()
            );
        }
    }
    Ok(())
}
