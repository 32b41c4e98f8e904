//! Skip and backbone activation norms at each decoder concat point.
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use skiptune::metrics::prop_ratios;
use skiptune::skip_tuning::{ScalingMode, SkipProfile};
use skiptune::unet::{MiniUNet, UNetConfig};
use skiptune::Tensor;

fn main() -> skiptune::Result<()> {
    let net = MiniUNet::new(UNetConfig::toy(), 5)?;
    let x = Tensor::randn(&[8, 1, 8, 8], &mut ChaCha8Rng::seed_from_u64(0)).scale(2.0);
    let sigma = [2.0; 8];
    for (name, p) in [
        ("baseline", None),
        ("uniform 0.7", Some(SkipProfile::uniform(0.7, net.k())?)),
        (
            "norm input only",
            Some(SkipProfile::uniform(0.7, net.k())?.with_mode(ScalingMode::NormInputOnly)),
        ),
    ] {
        let (_, taps) = net.forward(&x, &sigma, None, p.as_ref(), true)?;
        let (props, mean) = prop_ratios(&taps)?;
        let cells: Vec<String> = props.iter().map(|v| format!("{v:.3}")).collect();
        println!("{name:>16}: prop [{}] mean {mean:.3}", cells.join(", "));
    }
    Ok(())
}
