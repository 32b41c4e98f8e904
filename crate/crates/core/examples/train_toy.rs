//! Train the toy network on the shapes dataset and watch the loss fall.
use skiptune::data::{Dataset, DatasetKind};
use skiptune::diffusion::{train, NoiseSchedule, TrainConfig};
use skiptune::unet::{MiniUNet, UNetConfig};

fn main() -> skiptune::Result<()> {
    let steps: usize = std::env::args()
        .nth(1)
        .and_then(|a| a.parse().ok())
        .unwrap_or(300);
    let data = Dataset::generate(DatasetKind::Shapes, 1024, 0)?;
    let mut net = MiniUNet::new(UNetConfig::toy(), 5)?;
    let cfg = TrainConfig {
        steps,
        seed: 1,
        ..TrainConfig::default()
    };
    let report = train(
        &mut net,
        &data.images,
        &NoiseSchedule::default(),
        &cfg,
        None,
    )?;
    for (i, chunk) in report.losses.chunks(steps.div_ceil(10).max(1)).enumerate() {
        let mean = chunk.iter().sum::<f64>() / chunk.len() as f64;
        println!("steps {:>5}..: mean loss {mean:.4}", i * chunk.len());
    }
    println!("{} parameters", net.params().total_len());
    Ok(())
}
