mod common;

use std::sync::atomic::{AtomicUsize, Ordering};

use skiptune::diffusion::{GaussianDenoiser, NoiseSchedule};
use skiptune::samplers::{
    invert, sample, sample_ode_from, sample_stochastic, write_trajectory_csv, Churn, SamplerConfig,
    Solver,
};
use skiptune::skip_tuning::SkipProfile;
use skiptune::table;
use skiptune::unet::Denoiser;
use skiptune::{Error, Result, Tensor};

/// Wraps a denoiser and counts its calls.
struct Counting<D> {
    inner: D,
    calls: AtomicUsize,
}

impl<D: Denoiser> Denoiser for Counting<D> {
    fn denoise(&self, x: &Tensor, sigma: f64, profile: Option<&SkipProfile>) -> Result<Tensor> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.denoise(x, sigma, profile)
    }
}

fn gauss() -> GaussianDenoiser {
    GaussianDenoiser::new(0.25).unwrap()
}

fn rel_l2(a: &Tensor, b: &Tensor) -> f64 {
    a.sub(b).unwrap().l2_norm() / b.l2_norm()
}

#[test]
fn denoiser_calls_match_reported_nfe() {
    let s = NoiseSchedule::default();
    for solver in [Solver::Euler, Solver::Heun, Solver::Unipc] {
        for n in [1, 2, 5, 18] {
            let c = Counting {
                inner: gauss(),
                calls: AtomicUsize::new(0),
            };
            let cfg = SamplerConfig::new(solver, n);
            let z = Tensor::randn(&[3, 2], &mut common::rng(n as u64));
            let t = sample_ode_from(&c, &cfg, &s, None, &z).unwrap();
            assert_eq!(t.nfe, cfg.nfe(), "{solver:?} N={n}");
            assert_eq!(
                c.calls.load(Ordering::Relaxed),
                cfg.nfe(),
                "{solver:?} N={n}"
            );
        }
    }
}

#[test]
fn solvers_converge_on_gaussian_data() {
    let s = NoiseSchedule::default();
    let g = gauss();
    let z = Tensor::randn(&[32, 4], &mut common::rng(5));
    let exact = g.flow(&z.scale(s.sigma_max), s.sigma_max, 0.0);
    for solver in [Solver::Euler, Solver::Heun, Solver::Unipc] {
        let errs: Vec<f64> = [8, 16, 32]
            .iter()
            .map(|&n| {
                rel_l2(
                    &sample_ode_from(&g, &SamplerConfig::new(solver, n), &s, None, &z)
                        .unwrap()
                        .output,
                    &exact,
                )
            })
            .collect();
        assert!(
            errs[0] > errs[1] && errs[1] > errs[2],
            "{solver:?}: {errs:?}"
        );
    }
    let heun = sample_ode_from(&g, &SamplerConfig::new(Solver::Heun, 64), &s, None, &z).unwrap();
    let e = rel_l2(&heun.output, &exact);
    assert!(e < 1e-2, "{e}");
}

#[test]
fn inversion_round_trips_on_gaussian_data() {
    let s = NoiseSchedule::default();
    let g = gauss();
    let x0 = Tensor::randn(&[16, 4], &mut common::rng(6)).scale(0.5);
    for solver in [Solver::Heun, Solver::Unipc] {
        let cfg = SamplerConfig::new(solver, 100);
        let noise = invert(&g, &cfg, &s, None, &x0).unwrap().output;
        let back = sample_ode_from(&g, &cfg, &s, None, &noise).unwrap().output;
        assert!(rel_l2(&back, &x0) < 1e-2, "{solver:?}");
    }
}

#[test]
fn inverted_noise_has_unit_scale() {
    let s = NoiseSchedule::default();
    let g = gauss();
    let x0 = Tensor::randn(&[64, 16], &mut common::rng(7)).scale(0.5);
    let noise = invert(&g, &SamplerConfig::new(Solver::Heun, 50), &s, None, &x0)
        .unwrap()
        .output;
    let std = (noise.sq_norm() / noise.len() as f64).sqrt();
    assert!((std - 1.0).abs() < 0.1, "{std}");
}

#[test]
fn trajectory_csv_has_one_row_per_item_and_state() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("traj.csv");
    let cfg = SamplerConfig {
        record: true,
        ..SamplerConfig::new(Solver::Euler, 4)
    };
    let t = sample(&gauss(), &cfg, &NoiseSchedule::default(), None, &[3], 2).unwrap();
    assert_eq!(t.states.len(), 5);
    assert_eq!(*t.sigmas.last().unwrap(), 0.0);
    write_trajectory_csv(&path, &t).unwrap();
    let mut r = table::reader(&path, "trajectory").unwrap();
    assert_eq!(
        r.headers().unwrap().iter().collect::<Vec<_>>(),
        ["item", "step", "sigma", "x0", "x1", "x2"]
    );
    let rows: Vec<csv::StringRecord> = r.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 2 * 5);
    let last: f64 = rows[4][3].parse().unwrap();
    assert_eq!(last, t.output.item_slice(0)[0]);
}

#[test]
fn unrecorded_trajectory_cannot_be_written() {
    let dir = tempfile::tempdir().unwrap();
    let t = sample(
        &gauss(),
        &SamplerConfig::new(Solver::Euler, 2),
        &NoiseSchedule::default(),
        None,
        &[2],
        1,
    )
    .unwrap();
    assert!(matches!(
        write_trajectory_csv(&dir.path().join("t.csv"), &t),
        Err(Error::Config(_))
    ));
}

#[test]
fn churn_is_seeded_and_changes_output() {
    let s = NoiseSchedule::default();
    let cfg = SamplerConfig {
        churn: Churn::constant(0.5),
        seed: 9,
        ..SamplerConfig::new(Solver::Euler, 10)
    };
    let a = sample_stochastic(&gauss(), &cfg, &s, None, &[4], 3).unwrap();
    let b = sample_stochastic(&gauss(), &cfg, &s, None, &[4], 3).unwrap();
    assert!(a.output.bit_eq(&b.output));
    let ode = SamplerConfig {
        churn: Churn::default(),
        ..cfg.clone()
    };
    let c = sample_stochastic(&gauss(), &ode, &s, None, &[4], 3).unwrap();
    assert!(!a.output.bit_eq(&c.output));
}

#[test]
fn invalid_configs_are_rejected() {
    let s = NoiseSchedule::default();
    let z = Tensor::zeros(&[1, 2]);
    assert!(matches!(
        sample_ode_from(&gauss(), &SamplerConfig::new(Solver::Heun, 0), &s, None, &z),
        Err(Error::Config(_))
    ));
    let bad_order = SamplerConfig {
        unipc_order: 4,
        ..SamplerConfig::new(Solver::Unipc, 5)
    };
    assert!(bad_order.validate().is_err());
    let bad_tau = SamplerConfig {
        churn: Churn::constant(-1.0),
        ..SamplerConfig::default()
    };
    assert!(bad_tau.validate().is_err());
}
