use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::{seeds, ExperimentConfig};
use super::eval::{chunk_seed, generate, Evaluator};
use super::{LabeledReport, Outcome};
use crate::data::Dataset;
use crate::diffusion::{train, train_classifier, Classifier, LossBatch, LossConfig};
use crate::error::{Error, Result};
use crate::metrics::{
    gradient_norm_probe, mmd_unbiased, relative_mmd_table, KernelKind, KernelSpec, LossValue,
    MetricReport,
};
use crate::samplers::{invert, sample, write_trajectory_csv, Churn, SamplerConfig, Solver};
use crate::skip_tuning::{window_partition, ProfileConfig, SigmaWindow, SkipProfile, TimeSchedule};
use crate::table;
use crate::tensor::Tensor;
use crate::unet::MiniUNet;

pub(crate) struct Loaded {
    pub net: MiniUNet,
    pub classifier: Classifier,
    pub data: Dataset,
}

pub(crate) fn load_classifier(cfg: &ExperimentConfig) -> Result<Classifier> {
    let p = cfg.paths.classifier();
    if !p.exists() {
        return Err(Error::Config(format!(
            "missing classifier: {} does not exist",
            p.display()
        )));
    }
    Classifier::load(&p)
}

pub(crate) fn load_all(cfg: &ExperimentConfig) -> Result<Loaded> {
    Ok(Loaded {
        net: MiniUNet::load(&cfg.paths.checkpoint())?,
        classifier: load_classifier(cfg)?,
        data: Dataset::load(&cfg.paths.dataset())?,
    })
}

pub(crate) fn evaluator<'a>(
    cfg: &ExperimentConfig,
    net: &'a MiniUNet,
    l: &'a Loaded,
) -> Result<Evaluator<'a>> {
    Evaluator::new(
        net,
        &l.classifier,
        cfg.schedule,
        cfg.eval.clone(),
        cfg.train.loss.clone(),
        &l.data,
        cfg.seed.wrapping_add(seeds::EVAL),
    )
}

pub fn gen_data(cfg: &ExperimentConfig) -> Result<Outcome> {
    let d = Dataset::generate(
        cfg.data.kind,
        cfg.data.n,
        cfg.seed.wrapping_add(seeds::DATA),
    )?;
    let path = cfg.paths.dataset();
    d.save(&path)?;
    Ok(Outcome {
        outputs: vec![path],
        ..Outcome::default()
    })
}

/// Train on all but the last tenth of the dataset; report the held-out
/// pixel loss before and after next to the skip-only predictor.
pub fn train_model(cfg: &ExperimentConfig) -> Result<Outcome> {
    let data = Dataset::load(&cfg.paths.dataset())?;
    let n = data.len();
    if n < 2 {
        return Err(Error::Config("training needs at least 2 items".into()));
    }
    let n_hold = (n / 10).max(1);
    let train_set = data.images.slice_batch(0, n - n_hold);
    let held = data.images.slice_batch(n - n_hold, n);
    let batch = LossBatch::sample(
        held,
        &cfg.schedule,
        &mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(seeds::EVAL)),
    )?;
    let skip_only = skip_only_loss(&batch, &cfg.train.loss);

    let mut net = MiniUNet::new(cfg.model.clone(), cfg.seed.wrapping_add(seeds::MODEL_INIT))?;
    let before = crate::diffusion::loss_pixel(&net, &batch, &cfg.train.loss, None)?;
    let report = train(&mut net, &train_set, &cfg.schedule, &cfg.train, None)?;
    let after = crate::diffusion::loss_pixel(&net, &batch, &cfg.train.loss, None)?;

    let ckpt = cfg.paths.checkpoint();
    net.save(&ckpt)?;
    let csv = cfg.paths.out("train_loss.csv");
    let mut w = table::writer(&csv, "train_loss")?;
    w.write_record(["seed", "step", "loss"])?;
    for (i, l) in report.losses.iter().enumerate() {
        w.write_record([cfg.seed.to_string(), i.to_string(), table::num(*l)])?;
    }
    w.flush()?;
    let heldout = |v: f64| MetricReport {
        losses: vec![
            LossValue {
                space: "heldout_pixel".into(),
                sigma: None,
                value: v,
            },
            LossValue {
                space: "skip_only".into(),
                sigma: None,
                value: skip_only,
            },
        ],
        ..MetricReport::default()
    };
    Ok(Outcome {
        csv: Some(csv.clone()),
        outputs: vec![ckpt, csv],
        reports: vec![
            LabeledReport {
                label: "initial".into(),
                report: heldout(before),
            },
            LabeledReport {
                label: "final".into(),
                report: heldout(after),
            },
        ],
    })
}

/// Loss of the network whose raw output is identically zero, leaving only
/// the skip branch of the preconditioning. A trained model must beat it.
fn skip_only_loss(batch: &LossBatch, cfg: &LossConfig) -> f64 {
    let w = batch.weights(cfg);
    let xt = batch.noisy();
    (0..batch.x0.batch())
        .map(|b| {
            let c = crate::diffusion::Precond::new(batch.sigma[b], cfg.sigma_data).c_skip;
            let sq: f64 = xt
                .item_slice(b)
                .iter()
                .zip(batch.x0.item_slice(b))
                .map(|(x, x0)| (c * x - x0).powi(2))
                .sum();
            w[b] * sq
        })
        .sum::<f64>()
        / batch.x0.batch() as f64
}

pub fn train_classifier_run(cfg: &ExperimentConfig) -> Result<Outcome> {
    let data = Dataset::load(&cfg.paths.dataset())?;
    let (clf, acc) = train_classifier(&data.images, data.labels_or_err()?, &cfg.classifier)?;
    let path = cfg.paths.classifier();
    clf.save(&path)?;
    let csv = cfg.paths.out("classifier.csv");
    let mut w = table::writer(&csv, "classifier")?;
    w.write_record(["seed", "heldout_accuracy"])?;
    w.write_record([cfg.seed.to_string(), table::num(acc)])?;
    w.flush()?;
    Ok(Outcome {
        csv: Some(csv.clone()),
        outputs: vec![path, csv],
        ..Outcome::default()
    })
}

fn configured_profile(cfg: &ExperimentConfig, net: &MiniUNet) -> Result<SkipProfile> {
    cfg.profile.build(net.k(), &cfg.schedule)
}

/// Generated items go to `samples.bin`; with `sampler.record` the first
/// chunk's trajectory goes to `trajectory.csv`.
pub fn sample_to_file(cfg: &ExperimentConfig) -> Result<Outcome> {
    let net = MiniUNet::load(&cfg.paths.checkpoint())?;
    let profile = configured_profile(cfg, &net)?;
    let mut plain = cfg.sampler.clone();
    plain.record = false;
    let x = generate(
        &net,
        &plain,
        &cfg.schedule,
        Some(&profile),
        cfg.eval.n_samples,
    )?;
    let path = cfg.paths.out("samples.bin");
    Dataset {
        images: x,
        labels: None,
    }
    .save(&path)?;
    let mut outputs = vec![path];
    if cfg.sampler.record {
        let mut c0 = cfg.sampler.clone();
        c0.seed = chunk_seed(cfg.sampler.seed, 0);
        let c = net.config();
        let item = [c.input_channels, c.image_size, c.image_size];
        let traj = sample(
            &net,
            &c0,
            &cfg.schedule,
            Some(&profile),
            &item,
            cfg.eval.n_samples.min(super::SAMPLE_CHUNK),
        )?;
        let tp = cfg.paths.out("trajectory.csv");
        write_trajectory_csv(&tp, &traj)?;
        outputs.push(tp);
    }
    Ok(Outcome {
        outputs,
        ..Outcome::default()
    })
}

/// Invert the first `n_samples` dataset items to unit-scale noise, written
/// to `noise.bin`.
pub fn invert_dataset(cfg: &ExperimentConfig) -> Result<Outcome> {
    let net = MiniUNet::load(&cfg.paths.checkpoint())?;
    let data = Dataset::load(&cfg.paths.dataset())?;
    let profile = configured_profile(cfg, &net)?;
    let x = data
        .images
        .slice_batch(0, cfg.eval.n_samples.min(data.len()));
    let noise = invert_chunked(&net, &cfg.sampler, cfg, Some(&profile), &x)?;
    let path = cfg.paths.out("noise.bin");
    Dataset {
        images: noise,
        labels: None,
    }
    .save(&path)?;
    Ok(Outcome {
        outputs: vec![path],
        ..Outcome::default()
    })
}

fn invert_chunked(
    net: &MiniUNet,
    sampler: &SamplerConfig,
    cfg: &ExperimentConfig,
    profile: Option<&SkipProfile>,
    x: &Tensor,
) -> Result<Tensor> {
    let n = x.batch();
    let parts = (0..n.div_ceil(super::SAMPLE_CHUNK))
        .into_par_iter()
        .map(|i| {
            let chunk = x.slice_batch(
                i * super::SAMPLE_CHUNK,
                n.min((i + 1) * super::SAMPLE_CHUNK),
            );
            Ok(invert(net, sampler, &cfg.schedule, profile, &chunk)?.output)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&parts)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RhoSweepRow {
    pub rho_bottom: f64,
    pub rho_top: f64,
    pub steps: usize,
    pub nfe: usize,
    pub toy_fid: f64,
    pub immd: f64,
    pub loss_pixel: f64,
    pub loss_feature: f64,
}

/// Constant-in-sigma layer profile with the configured mode and fencepost.
fn layer_profile(cfg: &ExperimentConfig, k: usize, bottom: f64, top: f64) -> Result<SkipProfile> {
    ProfileConfig {
        rho_bottom: bottom,
        rho_top: top,
        schedule: TimeSchedule::Constant,
        window_index: None,
        ..cfg.profile.clone()
    }
    .build(k, &cfg.schedule)
}

/// One row per `(rho_bottom, steps)` in grid order.
pub fn run_rho_sweep(cfg: &ExperimentConfig) -> Result<(Outcome, Vec<RhoSweepRow>)> {
    let l = load_all(cfg)?;
    let ev = evaluator(cfg, &l.net, &l)?;
    let sw = &cfg.sweep;
    let grid: Vec<(f64, usize)> = sw
        .rho_values
        .iter()
        .flat_map(|&r| sw.steps.iter().map(move |&n| (r, n)))
        .collect();
    let rows = grid
        .par_iter()
        .map(|&(rho, steps)| {
            let profile = layer_profile(cfg, l.net.k(), rho, sw.rho_top)?;
            let sampler = SamplerConfig {
                solver: sw.solver,
                steps,
                ..cfg.sampler.clone()
            };
            let s = ev.sample_and_score(&sampler, Some(&profile))?;
            let (lp, lf) = ev.losses(Some(&profile))?;
            Ok(RhoSweepRow {
                rho_bottom: rho,
                rho_top: sw.rho_top,
                steps,
                nfe: sampler.nfe(),
                toy_fid: s.toy_fid,
                immd: s.immd,
                loss_pixel: lp,
                loss_feature: lf,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let csv = cfg.paths.out("rho_sweep.csv");
    let mut w = table::writer(&csv, "rho_sweep")?;
    w.write_record([
        "seed",
        "rho_bottom",
        "rho_top",
        "steps",
        "nfe",
        "toy_fid",
        "immd",
        "loss_pixel",
        "loss_feature",
    ])?;
    for r in &rows {
        w.write_record([
            cfg.seed.to_string(),
            table::num(r.rho_bottom),
            table::num(r.rho_top),
            r.steps.to_string(),
            r.nfe.to_string(),
            table::num(r.toy_fid),
            table::num(r.immd),
            table::num(r.loss_pixel),
            table::num(r.loss_feature),
        ])?;
    }
    w.flush()?;
    Ok((
        Outcome {
            csv: Some(csv.clone()),
            outputs: vec![csv],
            ..Outcome::default()
        },
        rows,
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowRow {
    /// `None` for the row with every window disabled.
    pub window: Option<usize>,
    pub sigma_low: f64,
    pub sigma_high: f64,
    pub toy_fid: f64,
    pub immd: f64,
}

/// The all-disabled row first, then one row per window (high noise first).
pub fn run_window_search(cfg: &ExperimentConfig) -> Result<(Outcome, Vec<WindowRow>)> {
    let l = load_all(cfg)?;
    let ev = evaluator(cfg, &l.net, &l)?;
    let ws = &cfg.window_search;
    let windows = window_partition(
        cfg.schedule.sigma_min,
        cfg.schedule.sigma_max,
        ws.n_windows,
        ws.steps_per_window,
    )?;
    let sampler = SamplerConfig {
        solver: ws.solver,
        steps: ws.n_windows * ws.steps_per_window,
        ..cfg.sampler.clone()
    };
    let base = layer_profile(cfg, l.net.k(), ws.rho, cfg.sweep.rho_top)?;
    let mut jobs: Vec<(Option<usize>, Vec<SigmaWindow>)> = vec![(None, Vec::new())];
    jobs.extend(windows.iter().enumerate().map(|(i, w)| (Some(i), vec![*w])));
    let rows = jobs
        .par_iter()
        .map(|(idx, active)| {
            let profile = base.clone().with_windows(Some(active.clone()));
            let s = ev.sample_and_score(&sampler, Some(&profile))?;
            let (lo, hi) = match idx {
                Some(i) => (windows[*i].low, windows[*i].high),
                None => (cfg.schedule.sigma_min, cfg.schedule.sigma_max),
            };
            Ok(WindowRow {
                window: *idx,
                sigma_low: lo,
                sigma_high: hi,
                toy_fid: s.toy_fid,
                immd: s.immd,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let csv = cfg.paths.out("window_search.csv");
    let mut w = table::writer(&csv, "window_search")?;
    w.write_record([
        "seed",
        "window_index",
        "sigma_low",
        "sigma_high",
        "rho",
        "toy_fid",
        "immd",
    ])?;
    for r in &rows {
        let (idx, rho) = match r.window {
            Some(i) => (i.to_string(), table::num(ws.rho)),
            None => ("none".to_string(), table::num(1.0)),
        };
        w.write_record([
            cfg.seed.to_string(),
            idx,
            table::num(r.sigma_low),
            table::num(r.sigma_high),
            rho,
            table::num(r.toy_fid),
            table::num(r.immd),
        ])?;
    }
    w.flush()?;
    Ok((
        Outcome {
            csv: Some(csv.clone()),
            outputs: vec![csv],
            ..Outcome::default()
        },
        rows,
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StochasticRow {
    pub rho: f64,
    pub tau: f64,
    pub toy_fid: f64,
    pub immd: f64,
}

/// Euler-Maruyama over the `rho x tau` grid; `tau = 0` is the Euler ODE.
pub fn run_stochastic_grid(cfg: &ExperimentConfig) -> Result<(Outcome, Vec<StochasticRow>)> {
    let l = load_all(cfg)?;
    let ev = evaluator(cfg, &l.net, &l)?;
    let sc = &cfg.stochastic;
    let grid: Vec<(f64, f64)> = sc
        .rho_values
        .iter()
        .flat_map(|&r| sc.tau_values.iter().map(move |&t| (r, t)))
        .collect();
    let rows = grid
        .par_iter()
        .map(|&(rho, tau)| {
            let profile = layer_profile(cfg, l.net.k(), rho, cfg.sweep.rho_top)?;
            let sampler = SamplerConfig {
                solver: Solver::Euler,
                steps: sc.steps,
                churn: Churn::constant(tau),
                ..cfg.sampler.clone()
            };
            let s = ev.sample_and_score(&sampler, Some(&profile))?;
            Ok(StochasticRow {
                rho,
                tau,
                toy_fid: s.toy_fid,
                immd: s.immd,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let csv = cfg.paths.out("stochastic_grid.csv");
    let mut w = table::writer(&csv, "stochastic_grid")?;
    w.write_record(["seed", "rho", "tau", "steps", "toy_fid", "immd"])?;
    for r in &rows {
        w.write_record([
            cfg.seed.to_string(),
            table::num(r.rho),
            table::num(r.tau),
            sc.steps.to_string(),
            table::num(r.toy_fid),
            table::num(r.immd),
        ])?;
    }
    w.flush()?;
    Ok((
        Outcome {
            csv: Some(csv.clone()),
            outputs: vec![csv],
            ..Outcome::default()
        },
        rows,
    ))
}

/// Noisy probe batch: the first `probe_batch` dataset items at `probe_sigma`.
fn probe_batch(cfg: &ExperimentConfig, data: &Dataset) -> Result<Tensor> {
    let n = cfg.eval.probe_batch.min(data.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(seeds::EVAL) ^ 0x5EED);
    Ok(LossBatch::at_sigma(
        data.images.slice_batch(0, n),
        cfg.eval.probe_sigma,
        &mut rng,
    )?
    .noisy())
}

/// Every measurement for the configured profile and sampler.
pub fn metrics_report(cfg: &ExperimentConfig) -> Result<(Outcome, MetricReport)> {
    let l = load_all(cfg)?;
    let ev = evaluator(cfg, &l.net, &l)?;
    let profile = configured_profile(cfg, &l.net)?;
    let x = probe_batch(cfg, &l.data)?;
    let sig = vec![cfg.eval.probe_sigma; x.batch()];
    let (_, taps) = l.net.forward(&x, &sig, None, Some(&profile), true)?;
    let mut report = MetricReport::default().with_props(&taps)?;
    report.gradient_norm = Some(gradient_norm_probe(
        &l.net,
        &x,
        cfg.eval.probe_sigma,
        Some(&profile),
        cfg.eval.scalarization,
    )?);
    let (lp, lf) = ev.losses(Some(&profile))?;
    report.losses.push(LossValue {
        space: "pixel".into(),
        sigma: None,
        value: lp,
    });
    report.losses.push(LossValue {
        space: "feature".into(),
        sigma: None,
        value: lf,
    });
    report.losses.extend(ev.per_sigma_losses(Some(&profile))?);
    let samples = ev.generate(&cfg.sampler, Some(&profile))?;
    for &k in &cfg.eval.mmd_kernels {
        report.mmd.insert(
            k,
            mmd_unbiased(&samples, ev.reference(), &KernelSpec::new(k))?,
        );
    }
    let s = ev.score(&samples)?;
    report.toy_fid = Some(s.toy_fid);
    report.immd = Some(s.immd);
    report.validate()?;
    let csv = cfg.paths.out("metrics.csv");
    report.write_csv(&csv)?;
    let txt = cfg.paths.out("metrics.txt");
    std::fs::write(&txt, format!("# seed {}\n{}", cfg.seed, report.to_text()))?;
    Ok((
        Outcome {
            csv: Some(csv.clone()),
            outputs: vec![csv, txt],
            reports: vec![LabeledReport {
                label: "profile".into(),
                report: report.clone(),
            }],
        },
        report,
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MmdRow {
    pub kernel: KernelKind,
    pub baseline: f64,
    pub tuned: f64,
    pub ratio: Option<f64>,
}

/// Invert dataset items with and without the configured profile and
/// compare both noise sets to fresh Gaussian noise, per kernel.
pub fn mmd_test(cfg: &ExperimentConfig) -> Result<(Outcome, Vec<MmdRow>)> {
    let net = MiniUNet::load(&cfg.paths.checkpoint())?;
    let data = Dataset::load(&cfg.paths.dataset())?;
    let profile = configured_profile(cfg, &net)?;
    let x = data
        .images
        .slice_batch(0, cfg.eval.n_samples.min(data.len()));
    let base = invert_chunked(&net, &cfg.sampler, cfg, None, &x)?;
    let tuned = invert_chunked(&net, &cfg.sampler, cfg, Some(&profile), &x)?;
    let flat = |t: Tensor| {
        let n = t.batch();
        let d = t.item_len();
        t.reshape(&[n, d])
    };
    let (base, tuned) = (flat(base)?, flat(tuned)?);
    let reference = Tensor::randn(
        base.shape(),
        &mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(seeds::EVAL) ^ 0x6A05),
    );
    let kernels: Vec<KernelSpec> = cfg
        .eval
        .mmd_kernels
        .iter()
        .map(|&k| KernelSpec::new(k))
        .collect();
    let rows: Vec<MmdRow> = relative_mmd_table(&base, &tuned, &reference, &kernels)?
        .into_iter()
        .map(|r| MmdRow {
            kernel: r.kernel,
            baseline: r.baseline,
            tuned: r.tuned,
            ratio: r.ratio,
        })
        .collect();
    let csv = cfg.paths.out("mmd_test.csv");
    let mut w = table::writer(&csv, "mmd_test")?;
    w.write_record(["seed", "kernel", "baseline_mmd", "tuned_mmd", "relative"])?;
    for r in &rows {
        w.write_record([
            cfg.seed.to_string(),
            r.kernel.to_string(),
            table::num(r.baseline),
            table::num(r.tuned),
            r.ratio.map_or_else(|| "undefined".to_string(), table::num),
        ])?;
    }
    w.flush()?;
    let mut report = MetricReport::default();
    report.mmd = rows.iter().map(|r| (r.kernel, r.tuned)).collect();
    Ok((
        Outcome {
            csv: Some(csv.clone()),
            outputs: vec![csv],
            reports: vec![LabeledReport {
                label: "tuned".into(),
                report,
            }],
        },
        rows,
    ))
}
