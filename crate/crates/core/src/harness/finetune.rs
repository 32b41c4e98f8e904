use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{seeds, ExperimentConfig};
use super::experiments::{evaluator, load_all};
use super::{LabeledReport, Outcome};
use crate::diffusion::{
    feature_term, Adam, FeatureMap, LossBatch, LossConfig, TrainConfig, Trainer,
};
use crate::error::{Error, Result};
use crate::metrics::{LossValue, MetricReport};
use crate::skip_tuning::{ScalingMode, SkipProfile};
use crate::table;
use crate::tensor::{Tape, Tensor};
use crate::unet::{Checkpoint, MiniUNet, ParamStore, SkipControl};

pub const RHO_CHECKPOINT_KIND: &str = "skip_coefficients";

/// Parameterization of the trainable coefficients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RhoVariant {
    /// `rho = sigmoid(theta)`, always in (0, 1).
    Sigmoid,
    /// `rho = theta`, free to leave (0, 1].
    Unconstrained,
}

impl RhoVariant {
    pub fn name(self) -> &'static str {
        match self {
            RhoVariant::Sigmoid => "sigmoid",
            RhoVariant::Unconstrained => "unconstrained",
        }
    }

    pub fn to_theta(self, rho: f64) -> f64 {
        match self {
            RhoVariant::Sigmoid => (rho / (1.0 - rho)).ln(),
            RhoVariant::Unconstrained => rho,
        }
    }

    pub fn to_rho(self, theta: &[f64]) -> Vec<f64> {
        match self {
            RhoVariant::Sigmoid => theta.iter().map(|t| 1.0 / (1.0 + (-t).exp())).collect(),
            RhoVariant::Unconstrained => theta.to_vec(),
        }
    }

    pub fn profile(self, theta: &[f64], mode: ScalingMode) -> Result<SkipProfile> {
        let rho = self.to_rho(theta);
        let p = match self {
            RhoVariant::Sigmoid => SkipProfile::explicit(rho)?,
            RhoVariant::Unconstrained => SkipProfile::unconstrained(rho)?,
        };
        Ok(p.with_mode(mode))
    }
}

/// Feature loss of the frozen network under coefficients `theta`, and its
/// gradient with respect to `theta`.
pub fn rho_objective(
    net: &MiniUNet,
    features: &dyn FeatureMap,
    batch: &LossBatch,
    loss_cfg: &LossConfig,
    theta: &Tensor,
    variant: RhoVariant,
    mode: ScalingMode,
) -> Result<(f64, Tensor)> {
    let tape = Tape::new();
    let pv = net.params().vars(&tape, false);
    let th = tape.leaf(theta.clone());
    let rho = match variant {
        RhoVariant::Sigmoid => th.sigmoid(),
        RhoVariant::Unconstrained => th.clone(),
    };
    let x = tape.constant(batch.noisy());
    let (d, _) = net.forward_var(
        &pv,
        &x,
        &batch.sigma,
        None,
        SkipControl::Trainable { rho: &rho, mode },
        false,
    )?;
    let loss = feature_term(&d, batch, loss_cfg, features)?;
    let v = loss.value().item()?;
    let g = tape.backward(&loss)?.get_or_zeros(&th);
    Ok((v, g))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneRhoRow {
    pub variant: RhoVariant,
    pub phase: &'static str,
    pub rho: Vec<f64>,
    pub toy_fid: f64,
    pub loss_feature: f64,
    /// Step at which a non-finite loss or an inadmissible coefficient
    /// stopped the run.
    pub diverged_at: Option<usize>,
}

/// Optimize the `k` coefficients of the frozen network against the feature
/// loss, once per variant, and compare sample quality before and after.
pub fn finetune_rho(cfg: &ExperimentConfig) -> Result<(Outcome, Vec<FinetuneRhoRow>)> {
    let l = load_all(cfg)?;
    let ev = evaluator(cfg, &l.net, &l)?;
    let fr = &cfg.finetune_rho;
    if !(fr.init_rho > 0.0 && fr.init_rho < 1.0) {
        return Err(Error::Config(
            "finetune_rho.init_rho must lie in (0, 1)".into(),
        ));
    }
    let k = l.net.k();
    let features: &dyn FeatureMap = &l.classifier;
    let mut rows = Vec::new();
    let mut outputs = Vec::new();
    for variant in [RhoVariant::Sigmoid, RhoVariant::Unconstrained] {
        let theta0 = vec![variant.to_theta(fr.init_rho); k];
        let mut store = ParamStore::new();
        store.push("theta", Tensor::from_vec(theta0.clone()));
        let mut adam = Adam::new(fr.adam.clone(), &store);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(seeds::TRAIN));
        let mut diverged_at = None;
        for step in 0..fr.steps {
            let x0 = crate::diffusion::draw_batch(&l.data.images, fr.batch_size, &mut rng);
            let batch = LossBatch::sample(x0, &cfg.schedule, &mut rng)?;
            let (v, g) = rho_objective(
                &l.net,
                features,
                &batch,
                &cfg.train.loss,
                store.get(0),
                variant,
                fr.mode,
            )?;
            if !v.is_finite() || !g.all_finite() {
                diverged_at = Some(step);
                break;
            }
            let last = store.get(0).clone();
            adam.step(&mut store, &[g])?;
            // Raw coefficients may leave the admissible range; keep the last
            // usable point.
            if variant.profile(store.get(0).data(), fr.mode).is_err() {
                store.set(0, last)?;
                diverged_at = Some(step);
                break;
            }
        }
        let theta = store.get(0).data().to_vec();
        for (phase, th) in [("before", &theta0), ("after", &theta)] {
            let profile = variant.profile(th, fr.mode)?;
            let s = ev.sample_and_score(&cfg.sampler, Some(&profile))?;
            let (_, lf) = ev.losses(Some(&profile))?;
            rows.push(FinetuneRhoRow {
                variant,
                phase,
                rho: variant.to_rho(th),
                toy_fid: s.toy_fid,
                loss_feature: lf,
                diverged_at: if phase == "after" { diverged_at } else { None },
            });
        }
        let mut ps = ParamStore::new();
        ps.push("rho", Tensor::from_vec(variant.to_rho(&theta)));
        let ck = Checkpoint {
            kind: RHO_CHECKPOINT_KIND.into(),
            config: format!("variant = \"{}\"\n", variant.name()),
            params: ps,
        };
        let path = cfg.paths.out(&format!("rho_{}.ckpt", variant.name()));
        ck.save(&path)?;
        outputs.push(path);
    }
    let csv = cfg.paths.out("finetune_rho.csv");
    let mut w = table::writer(&csv, "finetune_rho")?;
    let mut header = vec![
        "seed".to_string(),
        "variant".into(),
        "phase".into(),
        "toy_fid".into(),
        "loss_feature".into(),
        "diverged_at".into(),
    ];
    header.extend((0..k).map(|i| format!("rho_{i}")));
    w.write_record(&header)?;
    for r in &rows {
        let mut rec = vec![
            cfg.seed.to_string(),
            r.variant.name().to_string(),
            r.phase.to_string(),
            table::num(r.toy_fid),
            table::num(r.loss_feature),
            r.diverged_at.map_or_else(String::new, |s| s.to_string()),
        ];
        rec.extend(r.rho.iter().map(|&v| table::num(v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    outputs.push(csv.clone());
    Ok((
        Outcome {
            csv: Some(csv),
            outputs,
            reports: Vec::new(),
        },
        rows,
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneFullRow {
    pub milestone: usize,
    pub samples_seen: usize,
    pub loss_pixel: f64,
    pub loss_feature: f64,
    pub toy_fid: f64,
    pub immd: f64,
}

/// Train every parameter on the hybrid loss, measuring at each milestone
/// (cumulative training samples) and saving a checkpoint there.
pub fn finetune_full(cfg: &ExperimentConfig) -> Result<(Outcome, Vec<FinetuneFullRow>)> {
    let l = load_all(cfg)?;
    let ff = &cfg.finetune_full;
    if ff.batch_size == 0 {
        return Err(Error::Config(
            "finetune_full.batch_size must be positive".into(),
        ));
    }
    if ff.milestones.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config(
            "milestones must be strictly increasing".into(),
        ));
    }
    if let Some(m) = ff.milestones.iter().find(|m| *m % ff.batch_size != 0) {
        return Err(Error::Config(format!(
            "milestone {m} is not a multiple of batch_size {}",
            ff.batch_size
        )));
    }
    let mut net = l.net.clone();
    let loss = LossConfig {
        hybrid_feature_weight: ff.hybrid_feature_weight,
        ..cfg.train.loss.clone()
    };
    let tc = TrainConfig {
        steps: 0,
        batch_size: ff.batch_size,
        seed: cfg.seed.wrapping_add(seeds::TRAIN),
        adam: ff.adam.clone(),
        loss,
    };
    let mut trainer = Trainer::new(&net, tc);
    let features: &dyn FeatureMap = &l.classifier;
    let mut rows = Vec::new();
    let mut outputs = Vec::new();
    let mut reports = Vec::new();
    let mut seen = 0;
    for (i, &m) in ff.milestones.iter().enumerate() {
        let steps = (m - seen) / ff.batch_size;
        trainer
            .run(
                &mut net,
                &l.data.images,
                &cfg.schedule,
                Some(features),
                steps,
            )
            .map_err(|e| match e {
                Error::Training { step, loss } => Error::Numerical(format!(
                    "full fine-tuning diverged before milestone {i} (step {step}, loss {loss})"
                )),
                other => other,
            })?;
        seen = m;
        let ev = evaluator(cfg, &net, &l)?;
        let (lp, lf) = ev.losses(None)?;
        let s = ev.sample_and_score(&cfg.sampler, None)?;
        rows.push(FinetuneFullRow {
            milestone: i,
            samples_seen: m,
            loss_pixel: lp,
            loss_feature: lf,
            toy_fid: s.toy_fid,
            immd: s.immd,
        });
        let report = MetricReport {
            losses: vec![
                LossValue {
                    space: "pixel".into(),
                    sigma: None,
                    value: lp,
                },
                LossValue {
                    space: "feature".into(),
                    sigma: None,
                    value: lf,
                },
            ],
            toy_fid: Some(s.toy_fid),
            immd: Some(s.immd),
            ..MetricReport::default()
        };
        reports.push(LabeledReport {
            label: format!("milestone_{i}"),
            report,
        });
        let path = cfg.paths.out(&format!("full_m{i}.ckpt"));
        net.save(&path)?;
        outputs.push(path);
    }
    let csv = cfg.paths.out("finetune_full.csv");
    let mut w = table::writer(&csv, "finetune_full")?;
    w.write_record([
        "seed",
        "milestone",
        "samples_seen",
        "loss_pixel",
        "loss_feature",
        "toy_fid",
        "immd",
    ])?;
    for r in &rows {
        w.write_record([
            cfg.seed.to_string(),
            r.milestone.to_string(),
            r.samples_seen.to_string(),
            table::num(r.loss_pixel),
            table::num(r.loss_feature),
            table::num(r.toy_fid),
            table::num(r.immd),
        ])?;
    }
    w.flush()?;
    outputs.push(csv.clone());
    Ok((
        Outcome {
            csv: Some(csv),
            outputs,
            reports,
        },
        rows,
    ))
}
