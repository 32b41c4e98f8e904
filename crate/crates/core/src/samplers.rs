//! Probability-flow ODE integrators, the churned SDE sampler and ODE
//! inversion.
//!
//! An `N`-step sampler visits the `N`-point Karras grid followed by a
//! terminal `sigma = 0`, which is always reached by a first-order step
//! (`x <- D(x; sigma_{N-1})`). Heun therefore costs `2N - 1` denoiser
//! evaluations, Euler and UniPC `N`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{karras_grid, sampling_sigmas, NoiseSchedule};
use crate::error::{Error, Result};
use crate::skip_tuning::SkipProfile;
use crate::table;
use crate::tensor::Tensor;
use crate::unet::Denoiser;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    Euler,
    #[default]
    Heun,
    Unipc,
}

/// One constant piece of the churn function: `tau` on `(low, high]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChurnSegment {
    pub low: f64,
    pub high: f64,
    pub tau: f64,
}

/// Piecewise-constant stochastic strength `tau(sigma)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Churn {
    /// Value outside every segment.
    pub tau: f64,
    pub segments: Vec<ChurnSegment>,
}

impl Churn {
    pub fn constant(tau: f64) -> Self {
        Churn {
            tau,
            segments: Vec::new(),
        }
    }

    pub fn at(&self, sigma: f64) -> f64 {
        self.segments
            .iter()
            .find(|s| sigma > s.low && sigma <= s.high)
            .map_or(self.tau, |s| s.tau)
    }

    pub fn is_zero(&self) -> bool {
        self.tau == 0.0 && self.segments.iter().all(|s| s.tau == 0.0)
    }

    fn validate(&self) -> Result<()> {
        let all = std::iter::once(self.tau).chain(self.segments.iter().map(|s| s.tau));
        for t in all {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(Error::Config(format!(
                    "churn tau = {t} must be finite and >= 0"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub solver: Solver,
    pub steps: usize,
    pub unipc_order: usize,
    pub churn: Churn,
    pub seed: u64,
    /// Keep every intermediate state in the trajectory.
    pub record: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            solver: Solver::Heun,
            steps: 18,
            unipc_order: 2,
            churn: Churn::default(),
            seed: 0,
            record: false,
        }
    }
}

impl SamplerConfig {
    pub fn new(solver: Solver, steps: usize) -> Self {
        SamplerConfig {
            solver,
            steps,
            ..Self::default()
        }
    }

    /// Denoiser evaluations of one deterministic run.
    pub fn nfe(&self) -> usize {
        match self.solver {
            Solver::Heun => 2 * self.steps - 1,
            Solver::Euler | Solver::Unipc => self.steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        if !(1..=3).contains(&self.unipc_order) {
            return Err(Error::Config(format!(
                "unipc_order {} not in 1..=3",
                self.unipc_order
            )));
        }
        self.churn.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// Noise levels of the recorded states, in integration order.
    pub sigmas: Vec<f64>,
    /// States at `sigmas`; empty unless recording was requested.
    pub states: Vec<Tensor>,
    pub output: Tensor,
    pub nfe: usize,
}

/// `(x0_hat - x) / sigma^2`.
pub fn score_from_denoiser(x: &Tensor, sigma: f64, x0_hat: &Tensor) -> Result<Tensor> {
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("score needs sigma > 0, got {sigma}")));
    }
    let s2 = sigma * sigma;
    x0_hat.zip_map(x, |d, v| (d - v) / s2)
}

struct Counter<'a> {
    net: &'a dyn Denoiser,
    profile: Option<&'a SkipProfile>,
    nfe: usize,
}

impl Counter<'_> {
    fn d(&mut self, x: &Tensor, sigma: f64) -> Result<Tensor> {
        self.nfe += 1;
        self.net.denoise(x, sigma, self.profile)
    }

    /// ODE slope `dx/dsigma = (x - D) / sigma`.
    fn slope(&mut self, x: &Tensor, sigma: f64) -> Result<Tensor> {
        let d = self.d(x, sigma)?;
        x.zip_map(&d, |a, b| (a - b) / sigma)
    }
}

fn axpy(x: &Tensor, h: f64, d: &Tensor) -> Tensor {
    x.zip_map(d, |a, b| a + h * b).expect("same shape")
}

/// Initial state `sigma_max * z` with `z` drawn from `seed`.
pub fn initial_noise(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn check_output(x: &Tensor) -> Result<()> {
    if !x.all_finite() {
        return Err(Error::Numerical(
            "sampler produced non-finite values".into(),
        ));
    }
    Ok(())
}

/// Integrate the probability-flow ODE from `sigma_max * z` to 0.
pub fn sample_ode(
    net: &dyn Denoiser,
    cfg: &SamplerConfig,
    schedule: &NoiseSchedule,
    profile: Option<&SkipProfile>,
    item_shape: &[usize],
    batch: usize,
) -> Result<Trajectory> {
    let mut shape = vec![batch];
    shape.extend_from_slice(item_shape);
    let z = initial_noise(&shape, cfg.seed);
    sample_ode_from(net, cfg, schedule, profile, &z)
}

/// Like [`sample_ode`] from a given unit-scale noise batch.
pub fn sample_ode_from(
    net: &dyn Denoiser,
    cfg: &SamplerConfig,
    schedule: &NoiseSchedule,
    profile: Option<&SkipProfile>,
    noise: &Tensor,
) -> Result<Trajectory> {
    cfg.validate()?;
    let sigmas = sampling_sigmas(schedule, cfg.steps)?;
    let x = noise.scale(sigmas[0]);
    let mut c = Counter {
        net,
        profile,
        nfe: 0,
    };
    let mut traj = match cfg.solver {
        Solver::Euler => euler(&mut c, &sigmas, x, cfg.record)?,
        Solver::Heun => heun(&mut c, &sigmas, x, cfg.record)?,
        Solver::Unipc => unipc(&mut c, &sigmas, x, cfg.unipc_order, cfg.record)?,
    };
    traj.nfe = c.nfe;
    check_output(&traj.output)?;
    Ok(traj)
}

fn finish(sigmas: &[f64], states: Vec<Tensor>, x: Tensor, record: bool) -> Trajectory {
    Trajectory {
        sigmas: if record { sigmas.to_vec() } else { Vec::new() },
        states,
        output: x,
        nfe: 0,
    }
}

fn euler(c: &mut Counter, sigmas: &[f64], mut x: Tensor, record: bool) -> Result<Trajectory> {
    let mut states = Vec::new();
    for w in sigmas.windows(2) {
        if record {
            states.push(x.clone());
        }
        let d = c.slope(&x, w[0])?;
        x = axpy(&x, w[1] - w[0], &d);
    }
    if record {
        states.push(x.clone());
    }
    Ok(finish(sigmas, states, x, record))
}

fn heun(c: &mut Counter, sigmas: &[f64], mut x: Tensor, record: bool) -> Result<Trajectory> {
    let mut states = Vec::new();
    for w in sigmas.windows(2) {
        if record {
            states.push(x.clone());
        }
        let h = w[1] - w[0];
        let d = c.slope(&x, w[0])?;
        let x_next = axpy(&x, h, &d);
        x = if w[1] > 0.0 {
            let d2 = c.slope(&x_next, w[1])?;
            let avg = d.zip_map(&d2, |a, b| 0.5 * (a + b))?;
            axpy(&x, h, &avg)
        } else {
            x_next
        };
    }
    if record {
        states.push(x.clone());
    }
    Ok(finish(sigmas, states, x, record))
}

/// Solve a small dense system by Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty");
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

/// UniPC with `B(h) = h`, data prediction, `lambda = -ln(sigma)`. Each step
/// is a UniP predictor followed by a UniC corrector that reuses the model
/// evaluation at the predicted point; the order is lowered at the first and
/// final steps.
fn unipc(
    c: &mut Counter,
    sigmas: &[f64],
    mut x: Tensor,
    order: usize,
    record: bool,
) -> Result<Trajectory> {
    let n = sigmas.len() - 1;
    let mut states = Vec::new();
    let mut models: Vec<(Tensor, f64)> = Vec::new();
    models.push((c.d(&x, sigmas[0])?, -sigmas[0].ln()));
    for i in 0..n {
        if record {
            states.push(x.clone());
        }
        let (s, t) = (sigmas[i], sigmas[i + 1]);
        let m0 = models.last().expect("model history").0.clone();
        if t == 0.0 {
            x = m0;
            break;
        }
        let p = order.min(i + 1).min(n - i).min(models.len());
        let (lam_s, lam_t) = (-s.ln(), -t.ln());
        let h = lam_t - lam_s;
        let hh = -h;
        let h_phi_1 = hh.exp_m1();
        let b_h = hh;

        let mut rks = Vec::with_capacity(p);
        let mut d1s: Vec<Tensor> = Vec::with_capacity(p);
        for j in 1..p {
            let (mj, lam_j) = &models[models.len() - 1 - j];
            let rk = (lam_j - lam_s) / h;
            d1s.push(mj.zip_map(&m0, |a, b| (a - b) / rk)?);
            rks.push(rk);
        }
        rks.push(1.0);
        let r_mat: Vec<Vec<f64>> = (0..p)
            .map(|r| rks.iter().map(|k| k.powi(r as i32)).collect())
            .collect();
        let mut b = Vec::with_capacity(p);
        let mut h_phi_k = h_phi_1 / hh - 1.0;
        let mut fact = 1.0;
        for r in 1..=p {
            b.push(h_phi_k * fact / b_h);
            fact *= (r + 1) as f64;
            h_phi_k = h_phi_k / hh - 1.0 / fact;
        }

        let ratio = t / s;
        let x_lin = x.zip_map(&m0, |xv, mv| ratio * xv - h_phi_1 * mv)?;
        let rhos_p = match p {
            1 => Vec::new(),
            2 => vec![0.5],
            _ => solve(
                r_mat[..p - 1]
                    .iter()
                    .map(|row| row[..p - 1].to_vec())
                    .collect(),
                b[..p - 1].to_vec(),
            ),
        };
        let mut x_pred = x_lin.clone();
        for (rho, d1) in rhos_p.iter().zip(&d1s) {
            x_pred = axpy(&x_pred, -b_h * rho, d1);
        }
        let model_t = c.d(&x_pred, t)?;

        let rhos_c = if p == 1 { vec![0.5] } else { solve(r_mat, b) };
        let d1_t = model_t.sub(&m0)?;
        let mut corr = x_lin;
        for (rho, d1) in rhos_c[..p - 1].iter().zip(&d1s) {
            corr = axpy(&corr, -b_h * rho, d1);
        }
        x = axpy(&corr, -b_h * rhos_c[p - 1], &d1_t);
        models.push((model_t, lam_t));
        if models.len() > order {
            models.remove(0);
        }
    }
    if record {
        states.push(x.clone());
    }
    Ok(finish(sigmas, states, x, record))
}

/// Euler-Maruyama on the churned reverse SDE
/// `dx = (1 + tau^2) (x - D)/sigma dsigma + tau sqrt(2 sigma) dW`.
/// Where `tau = 0` no noise is drawn and the update is the Euler ODE step.
pub fn sample_stochastic(
    net: &dyn Denoiser,
    cfg: &SamplerConfig,
    schedule: &NoiseSchedule,
    profile: Option<&SkipProfile>,
    item_shape: &[usize],
    batch: usize,
) -> Result<Trajectory> {
    cfg.validate()?;
    let mut shape = vec![batch];
    shape.extend_from_slice(item_shape);
    let sigmas = sampling_sigmas(schedule, cfg.steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x = Tensor::randn(&shape, &mut rng).scale(sigmas[0]);
    let mut c = Counter {
        net,
        profile,
        nfe: 0,
    };
    let mut states = Vec::new();
    for w in sigmas.windows(2) {
        if cfg.record {
            states.push(x.clone());
        }
        let (s, h) = (w[0], w[1] - w[0]);
        let tau = cfg.churn.at(s);
        let d = c.slope(&x, s)?;
        x = axpy(&x, (1.0 + tau * tau) * h, &d);
        if tau > 0.0 {
            let z = Tensor::randn(&shape, &mut rng);
            x = axpy(&x, tau * (2.0 * s * h.abs()).sqrt(), &z);
        }
    }
    if cfg.record {
        states.push(x.clone());
    }
    check_output(&x)?;
    let mut t = finish(&sigmas, states, x, cfg.record);
    t.nfe = c.nfe;
    Ok(t)
}

/// ODE sampling when the churn is zero everywhere, SDE sampling otherwise.
pub fn sample(
    net: &dyn Denoiser,
    cfg: &SamplerConfig,
    schedule: &NoiseSchedule,
    profile: Option<&SkipProfile>,
    item_shape: &[usize],
    batch: usize,
) -> Result<Trajectory> {
    if cfg.churn.is_zero() {
        sample_ode(net, cfg, schedule, profile, item_shape, batch)
    } else {
        sample_stochastic(net, cfg, schedule, profile, item_shape, batch)
    }
}

/// Integrate the ODE upward from `sigma_min` to `sigma_max` over the
/// reversed `N`-point Karras grid (the mirror image of an `N`-step sampling
/// run without its final step to 0). The output is `x(sigma_max) /
/// sigma_max`, i.e. unit-scale noise.
pub fn invert(
    net: &dyn Denoiser,
    cfg: &SamplerConfig,
    schedule: &NoiseSchedule,
    profile: Option<&SkipProfile>,
    data: &Tensor,
) -> Result<Trajectory> {
    cfg.validate()?;
    if data.batch() == 0 {
        return Ok(Trajectory {
            sigmas: Vec::new(),
            states: Vec::new(),
            output: data.clone(),
            nfe: 0,
        });
    }
    let mut sigmas = karras_grid(schedule, cfg.steps.max(2))?;
    sigmas.reverse();
    let mut c = Counter {
        net,
        profile,
        nfe: 0,
    };
    let x = data.clone();
    let mut traj = match cfg.solver {
        Solver::Euler => euler(&mut c, &sigmas, x, cfg.record)?,
        Solver::Heun => heun(&mut c, &sigmas, x, cfg.record)?,
        Solver::Unipc => unipc(&mut c, &sigmas, x, cfg.unipc_order, cfg.record)?,
    };
    traj.nfe = c.nfe;
    traj.output = traj.output.scale(1.0 / schedule.sigma_max);
    check_output(&traj.output)?;
    Ok(traj)
}

/// CSV dump of a recorded trajectory: `item, step, sigma, x0, x1, ...`.
pub fn write_trajectory_csv(path: &Path, traj: &Trajectory) -> Result<()> {
    if traj.states.is_empty() {
        return Err(Error::Config("trajectory was not recorded".into()));
    }
    let mut w = table::writer(path, "trajectory")?;
    let dim = traj.states[0].item_len();
    let mut header = vec!["item".to_string(), "step".into(), "sigma".into()];
    header.extend((0..dim).map(|j| format!("x{j}")));
    w.write_record(&header)?;
    for item in 0..traj.states[0].batch() {
        for (step, (s, x)) in traj.sigmas.iter().zip(&traj.states).enumerate() {
            let mut row = vec![item.to_string(), step.to_string(), table::num(*s)];
            row.extend(x.item_slice(item).iter().map(|&v| table::num(v)));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}
