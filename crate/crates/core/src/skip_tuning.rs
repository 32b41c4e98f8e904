//! Skip-coefficient profiles: per-layer interpolation, time schedules and
//! sigma-window masks.
//!
//! A profile answers one question: by how much is skip connection `i`
//! scaled when the denoiser is evaluated at noise level `sigma`? Layers are
//! indexed bottom (lowest resolution, first decoder concat) to top.

use serde::{Deserialize, Serialize};

use crate::diffusion::{karras_grid, NoiseSchedule};
use crate::error::{Error, Result};

/// Where the skip coefficient is applied inside the first decoder block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingMode {
    /// Scale the skip activation before concatenation, so both the block's
    /// normalized branch and its residual branch see it.
    #[default]
    AtConcat,
    /// Scale only the skip channels of the block's residual input.
    OrigOnly,
    /// Scale only the skip channels entering the block's first GroupNorm.
    NormInputOnly,
}

/// How the per-layer step is derived from the two endpoints.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fencepost {
    /// `step = (top - bottom) / k`; the top tap receives `top - step`.
    #[default]
    Formula,
    /// `step = (top - bottom) / (k - 1)`; the top tap receives `top`.
    Endpoint,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeSchedule {
    #[default]
    Constant,
    /// `rho0` at `sigma_min`, rising linearly to 1 at `sigma_max`.
    Increasing,
    /// 1 at `sigma_min`, falling linearly to `rho0` at `sigma_max`.
    Decreasing,
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v <= 1.0) {
        return Err(Error::Domain(format!("{name} = {v} must lie in (0, 1]")));
    }
    Ok(())
}

/// Layerwise linear interpolation, `rho_i = bottom + step * i`, `i = 0..k`.
pub fn rho_layers(bottom: f64, top: f64, k: usize) -> Result<Vec<f64>> {
    rho_layers_with(bottom, top, k, Fencepost::Formula)
}

pub fn rho_layers_with(bottom: f64, top: f64, k: usize, fencepost: Fencepost) -> Result<Vec<f64>> {
    check_unit("rho_bottom", bottom)?;
    check_unit("rho_top", top)?;
    if k == 0 {
        return Err(Error::Config("rho_layers needs k >= 1".into()));
    }
    let denom = match fencepost {
        Fencepost::Formula => k as f64,
        Fencepost::Endpoint if k == 1 => 1.0,
        Fencepost::Endpoint => (k - 1) as f64,
    };
    let step = (top - bottom) / denom;
    Ok((0..k).map(|i| bottom + step * i as f64).collect())
}

/// Time multiplier in `[min(rho0, 1), 1]`, linear in sigma over `domain`.
pub fn rho_time(schedule: TimeSchedule, rho0: f64, sigma: f64, domain: (f64, f64)) -> f64 {
    let (lo, hi) = domain;
    let frac = ((sigma - lo) / (hi - lo)).clamp(0.0, 1.0);
    match schedule {
        TimeSchedule::Constant => 1.0,
        TimeSchedule::Increasing => rho0 + (1.0 - rho0) * frac,
        TimeSchedule::Decreasing => 1.0 + (rho0 - 1.0) * frac,
    }
}

/// A sigma interval `(low, high]`, closed at `low` when `include_low`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaWindow {
    pub low: f64,
    pub high: f64,
    pub include_low: bool,
}

impl SigmaWindow {
    pub fn contains(&self, sigma: f64) -> bool {
        sigma <= self.high && (sigma > self.low || (self.include_low && sigma == self.low))
    }
}

/// Split `[sigma_min, sigma_max]` into `n_windows` consecutive windows, each
/// covering `steps_per_window` points of the Karras grid with
/// `n_windows * steps_per_window` points. Windows are ordered from high
/// noise to low noise.
pub fn window_partition(
    sigma_min: f64,
    sigma_max: f64,
    n_windows: usize,
    steps_per_window: usize,
) -> Result<Vec<SigmaWindow>> {
    let n = n_windows * steps_per_window;
    if n_windows == 0 || steps_per_window == 0 || n < 2 {
        return Err(Error::Config(format!(
            "{n_windows} windows of {steps_per_window} steps leave no usable grid"
        )));
    }
    let schedule = NoiseSchedule {
        sigma_min,
        sigma_max,
        ..NoiseSchedule::default()
    };
    let grid = karras_grid(&schedule, n)?;
    Ok((0..n_windows)
        .map(|w| {
            let high = grid[w * steps_per_window];
            if w + 1 == n_windows {
                SigmaWindow {
                    low: sigma_min,
                    high,
                    include_low: true,
                }
            } else {
                SigmaWindow {
                    low: grid[(w + 1) * steps_per_window],
                    high,
                    include_low: false,
                }
            }
        })
        .collect())
}

/// The complete skip-scaling configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkipProfile {
    layers: Vec<f64>,
    pub schedule: TimeSchedule,
    pub rho0: f64,
    pub domain: (f64, f64),
    /// `None`: active at every sigma. `Some(ws)`: active only inside the
    /// union of `ws` (an empty list disables the profile entirely).
    pub windows: Option<Vec<SigmaWindow>>,
    pub mode: ScalingMode,
    unconstrained: bool,
}

impl SkipProfile {
    fn from_layers(layers: Vec<f64>) -> Self {
        let d = NoiseSchedule::default();
        SkipProfile {
            layers,
            schedule: TimeSchedule::Constant,
            rho0: 1.0,
            domain: (d.sigma_min, d.sigma_max),
            windows: None,
            mode: ScalingMode::AtConcat,
            unconstrained: false,
        }
    }

    pub fn linear(bottom: f64, top: f64, k: usize) -> Result<Self> {
        Ok(Self::from_layers(rho_layers(bottom, top, k)?))
    }

    pub fn linear_with(bottom: f64, top: f64, k: usize, fencepost: Fencepost) -> Result<Self> {
        Ok(Self::from_layers(rho_layers_with(
            bottom, top, k, fencepost,
        )?))
    }

    pub fn uniform(rho: f64, k: usize) -> Result<Self> {
        Self::linear_with(rho, rho, k, Fencepost::Endpoint)
    }

    pub fn identity(k: usize) -> Self {
        Self::from_layers(vec![1.0; k])
    }

    /// Per-layer coefficients given directly, each in `(0, 1]`.
    pub fn explicit(layers: Vec<f64>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("profile needs at least one layer".into()));
        }
        for (i, &r) in layers.iter().enumerate() {
            check_unit(&format!("rho[{i}]"), r)?;
        }
        Ok(Self::from_layers(layers))
    }

    /// Per-layer coefficients that may exceed 1 (amplified skips). Only
    /// positivity is enforced.
    pub fn unconstrained(layers: Vec<f64>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("profile needs at least one layer".into()));
        }
        if let Some(r) = layers.iter().find(|r| !(**r > 0.0) || !r.is_finite()) {
            return Err(Error::Domain(format!(
                "skip coefficient {r} must be positive"
            )));
        }
        let mut p = Self::from_layers(layers);
        p.unconstrained = true;
        Ok(p)
    }

    pub fn with_schedule(mut self, schedule: TimeSchedule, rho0: f64) -> Result<Self> {
        if schedule != TimeSchedule::Constant {
            check_unit("rho0", rho0)?;
        }
        self.schedule = schedule;
        self.rho0 = rho0;
        Ok(self)
    }

    pub fn with_domain(mut self, domain: (f64, f64)) -> Result<Self> {
        if !(domain.0 > 0.0 && domain.0 < domain.1) {
            return Err(Error::Config(format!("bad schedule domain {domain:?}")));
        }
        self.domain = domain;
        Ok(self)
    }

    pub fn with_windows(mut self, windows: Option<Vec<SigmaWindow>>) -> Self {
        self.windows = windows;
        self
    }

    pub fn with_mode(mut self, mode: ScalingMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn k(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[f64] {
        &self.layers
    }

    pub fn is_unconstrained(&self) -> bool {
        self.unconstrained
    }

    pub fn active_at(&self, sigma: f64) -> bool {
        self.windows
            .as_ref()
            .is_none_or(|ws| ws.iter().any(|w| w.contains(sigma)))
    }

    /// Effective coefficient of `layer` at `sigma`.
    pub fn evaluate(&self, layer: usize, sigma: f64) -> f64 {
        if !self.active_at(sigma) {
            return 1.0;
        }
        self.layers[layer] * rho_time(self.schedule, self.rho0, sigma, self.domain)
    }

    pub fn scales_at(&self, sigma: f64) -> Vec<f64> {
        (0..self.k()).map(|i| self.evaluate(i, sigma)).collect()
    }

    /// Check the coefficient range the network accepts.
    pub fn validate_for(&self, k: usize) -> Result<()> {
        if self.k() != k {
            return Err(Error::Config(format!(
                "profile has {} coefficients, network has {k} skip connections",
                self.k()
            )));
        }
        if !self.unconstrained {
            for (i, &r) in self.layers.iter().enumerate() {
                check_unit(&format!("rho[{i}]"), r)?;
            }
        }
        Ok(())
    }
}

/// Profile section of an experiment config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileConfig {
    pub rho_bottom: f64,
    pub rho_top: f64,
    pub schedule: TimeSchedule,
    pub rho0: f64,
    /// Restrict the profile to one window of the partition.
    pub window_index: Option<usize>,
    pub n_windows: usize,
    pub steps_per_window: usize,
    pub mode: ScalingMode,
    pub fencepost: Fencepost,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        ProfileConfig {
            rho_bottom: 1.0,
            rho_top: 1.0,
            schedule: TimeSchedule::Constant,
            rho0: 1.0,
            window_index: None,
            n_windows: 13,
            steps_per_window: 4,
            mode: ScalingMode::AtConcat,
            fencepost: Fencepost::Formula,
        }
    }
}

impl ProfileConfig {
    pub fn build(&self, k: usize, schedule: &NoiseSchedule) -> Result<SkipProfile> {
        let windows = match self.window_index {
            None => None,
            Some(i) => {
                let all = window_partition(
                    schedule.sigma_min,
                    schedule.sigma_max,
                    self.n_windows,
                    self.steps_per_window,
                )?;
                let w = all.get(i).copied().ok_or_else(|| {
                    Error::Config(format!("window_index {i} out of {}", all.len()))
                })?;
                Some(vec![w])
            }
        };
        SkipProfile::linear_with(self.rho_bottom, self.rho_top, k, self.fencepost)?
            .with_domain((schedule.sigma_min, schedule.sigma_max))?
            .with_schedule(self.schedule, self.rho0)
            .map(|p| p.with_windows(windows).with_mode(self.mode))
    }
}
