//! How skip scaling changes the input-gradient norm of the denoiser.
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use skiptune::data::{Dataset, DatasetKind};
use skiptune::diffusion::{train, LossBatch, NoiseSchedule, TrainConfig};
use skiptune::metrics::{gradient_norm_probe, spearman, Scalarization};
use skiptune::skip_tuning::SkipProfile;
use skiptune::unet::{MiniUNet, UNetConfig};

fn main() -> skiptune::Result<()> {
    let data = Dataset::generate(DatasetKind::Shapes, 1024, 0)?;
    let mut net = MiniUNet::new(UNetConfig::toy(), 5)?;
    let cfg = TrainConfig {
        steps: 300,
        seed: 1,
        ..TrainConfig::default()
    };
    train(
        &mut net,
        &data.images,
        &NoiseSchedule::default(),
        &cfg,
        None,
    )?;

    let rhos = [0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for b in 0..5u64 {
        let x0 = data
            .images
            .slice_batch(16 * b as usize, 16 * (b as usize + 1));
        let x = LossBatch::at_sigma(x0, 5.0, &mut ChaCha8Rng::seed_from_u64(b))?.noisy();
        for &rho in &rhos {
            let p = SkipProfile::uniform(rho, net.k())?;
            let g = gradient_norm_probe(&net, &x, 5.0, Some(&p), Scalarization::OutputSum)?;
            if b == 0 {
                println!("rho {rho:.1}: E||grad_x D|| = {g:.4}");
            }
            xs.push(rho);
            ys.push(g);
        }
    }
    let s = spearman(&xs, &ys)?;
    println!(
        "Spearman over {} pairs: rho = {:.3}, p = {:.2e}",
        s.n, s.rho, s.p_value
    );
    Ok(())
}
