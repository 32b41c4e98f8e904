//! Building skip-coefficient profiles: layerwise, time-dependent and
//! windowed.
use skiptune::diffusion::NoiseSchedule;
use skiptune::skip_tuning::{window_partition, ProfileConfig, SkipProfile, TimeSchedule};

fn main() -> skiptune::Result<()> {
    let k = 6;
    let linear = SkipProfile::linear(0.6, 1.0, k)?;
    println!("linear 0.6 -> 1.0: {:?}", linear.layers());

    let timed = SkipProfile::linear(0.6, 1.0, k)?.with_schedule(TimeSchedule::Increasing, 0.5)?;
    for sigma in [0.002, 1.0, 40.0, 80.0] {
        println!(
            "increasing, sigma {sigma:>6}: {:.3?}",
            timed.scales_at(sigma)
        );
    }

    let windows = window_partition(0.002, 80.0, 13, 4)?;
    let w = windows[6];
    println!("window 6 covers ({:.4}, {:.4}]", w.low, w.high);
    let windowed = SkipProfile::uniform(0.8, k)?.with_windows(Some(vec![w]));
    for sigma in [w.high * 1.01, w.high, (w.low + w.high) / 2.0, w.low] {
        println!(
            "  sigma {sigma:.4}: active {} scales {:?}",
            windowed.active_at(sigma),
            windowed.scales_at(sigma)
        );
    }

    let from_config = ProfileConfig {
        rho_bottom: 0.7,
        window_index: Some(3),
        ..ProfileConfig::default()
    }
    .build(k, &NoiseSchedule::default())?;
    println!("config-built profile: {from_config:?}");
    Ok(())
}
