//! Skip-norm proportions, the gradient-norm complexity probe, kernel MMD,
//! Frechet distance and rank statistics.

mod frechet;
mod kernels;
mod mmd;
mod probe;
mod stats;

pub use frechet::{frechet_gaussian, immd, mean_cov, toy_fid, FRECHET_EPS};
pub use kernels::{Kernel, KernelKind, KernelSpec};
pub use mmd::{
    mmd_unbiased, mmd_with, permutation_test, relative_mmd_table, PermutationTest, RelativeMmd,
    MMD_GUARD,
};
pub use probe::{gradient_norm, gradient_norm_probe, output_sum_gradient_norm, Scalarization};
pub use stats::{ranks, spearman, Spearman};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::table;
use crate::unet::SkipTap;

/// Per-layer `||d_i|| / ||u_i||` and their mean.
pub fn prop_ratios(taps: &[SkipTap]) -> Result<(Vec<f64>, f64)> {
    if taps.is_empty() {
        return Err(Error::Domain("no taps recorded".into()));
    }
    let mut props = Vec::with_capacity(taps.len());
    for t in taps {
        if !(t.u_norm > 0.0) {
            return Err(Error::DegenerateActivation(format!(
                "layer {} has zero up-sampling norm",
                t.layer
            )));
        }
        props.push(t.prop());
    }
    let avg = props.iter().sum::<f64>() / props.len() as f64;
    Ok((props, avg))
}

/// One loss measurement. `sigma = None` means averaged over the training
/// noise distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub space: String,
    pub sigma: Option<f64>,
    pub value: f64,
}

/// Measurements of one configuration. Absent quantities are not emitted.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub prop: Vec<f64>,
    pub avg_prop: Option<f64>,
    pub gradient_norm: Option<f64>,
    pub losses: Vec<LossValue>,
    pub mmd: BTreeMap<KernelKind, f64>,
    pub toy_fid: Option<f64>,
    pub immd: Option<f64>,
}

/// `name, qualifier, value` row of the metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub name: String,
    pub qualifier: String,
    pub value: f64,
}

pub const METRICS_SCHEMA: &str = "metrics";

impl MetricReport {
    pub fn with_props(mut self, taps: &[SkipTap]) -> Result<Self> {
        let (p, a) = prop_ratios(taps)?;
        self.prop = p;
        self.avg_prop = Some(a);
        Ok(self)
    }

    pub fn rows(&self) -> Vec<MetricRow> {
        let row = |name: &str, qualifier: String, value: f64| MetricRow {
            name: name.into(),
            qualifier,
            value,
        };
        let mut out: Vec<MetricRow> = self
            .prop
            .iter()
            .enumerate()
            .map(|(i, &v)| row("prop", format!("layer={i}"), v))
            .collect();
        out.extend(self.avg_prop.map(|v| row("avg_prop", String::new(), v)));
        out.extend(
            self.gradient_norm
                .map(|v| row("gradient_norm", String::new(), v)),
        );
        for l in &self.losses {
            let q = match l.sigma {
                Some(s) => format!("{};sigma={}", l.space, table::num(s)),
                None => l.space.clone(),
            };
            out.push(row("loss", q, l.value));
        }
        out.extend(self.mmd.iter().map(|(k, &v)| row("mmd", k.to_string(), v)));
        out.extend(self.toy_fid.map(|v| row("toy_fid", String::new(), v)));
        out.extend(self.immd.map(|v| row("immd", String::new(), v)));
        out
    }

    /// All values finite and proportions non-negative.
    pub fn validate(&self) -> Result<()> {
        if let Some(r) = self.rows().iter().find(|r| !r.value.is_finite()) {
            return Err(Error::Numerical(format!(
                "metric {} [{}] is not finite",
                r.name, r.qualifier
            )));
        }
        if self.prop.iter().any(|&p| p < 0.0) {
            return Err(Error::Numerical("negative skip proportion".into()));
        }
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = table::writer(path, METRICS_SCHEMA)?;
        w.write_record(["name", "qualifier", "value"])?;
        for r in self.rows() {
            w.write_record([r.name, r.qualifier, table::num(r.value)])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_rows(path: &Path) -> Result<Vec<MetricRow>> {
        let mut r = table::reader(path, METRICS_SCHEMA)?;
        r.deserialize()
            .map(|row| row.map_err(Error::from))
            .collect()
    }

    /// Aligned human-readable rendering.
    pub fn to_text(&self) -> String {
        let rows = self.rows();
        let width = rows
            .iter()
            .map(|r| r.name.len() + r.qualifier.len() + 3)
            .max()
            .unwrap_or(0);
        let mut s = String::new();
        for r in rows {
            let label = if r.qualifier.is_empty() {
                r.name
            } else {
                format!("{} [{}]", r.name, r.qualifier)
            };
            let _ = writeln!(s, "{label:<width$}  {:.6e}", r.value);
        }
        s
    }
}
