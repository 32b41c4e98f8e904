//! Where the denoising error lives: Haar band losses across noise levels.
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use skiptune::data::{Dataset, DatasetKind};
use skiptune::diffusion::{loss_wavelet_bands, GaussianDenoiser, LossBatch};

fn main() -> skiptune::Result<()> {
    let data = Dataset::generate(DatasetKind::Shapes, 512, 0)?;
    let g = GaussianDenoiser::new(0.25)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    println!(
        "{:>8} {:>10} {:>10} {:>10} {:>10}",
        "sigma", "LL", "LH", "HL", "HH"
    );
    for sigma in [0.05, 0.2, 0.5, 1.0, 2.0, 5.0] {
        let b = LossBatch::at_sigma(data.images.clone(), sigma, &mut rng)?;
        let [ll, lh, hl, hh] = loss_wavelet_bands(&g, &b, None)?.as_array();
        println!("{sigma:>8} {ll:>10.4} {lh:>10.4} {hl:>10.4} {hh:>10.4}");
    }
    Ok(())
}
