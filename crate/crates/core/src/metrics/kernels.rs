use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Linear,
    Rbf,
    Laplacian,
    Sigmoid,
    Imq,
    Polynomial,
    Cosine,
}

impl KernelKind {
    pub const ALL: [KernelKind; 7] = [
        KernelKind::Linear,
        KernelKind::Rbf,
        KernelKind::Laplacian,
        KernelKind::Sigmoid,
        KernelKind::Imq,
        KernelKind::Polynomial,
        KernelKind::Cosine,
    ];

    pub fn name(self) -> &'static str {
        match self {
            KernelKind::Linear => "linear",
            KernelKind::Rbf => "rbf",
            KernelKind::Laplacian => "laplacian",
            KernelKind::Sigmoid => "sigmoid",
            KernelKind::Imq => "imq",
            KernelKind::Polynomial => "polynomial",
            KernelKind::Cosine => "cosine",
        }
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl std::str::FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        KernelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown kernel {s:?}")))
    }
}

/// Kernel choice plus hyperparameters. `None` fields take data-dependent
/// defaults when the kernel is resolved against a pair of sample sets.
///
/// * rbf: `exp(-gamma ||x - y||^2)`, default `gamma = 1 / median ||x - y||^2`
/// * laplacian: `exp(-gamma ||x - y||_1)`, default `gamma = 1 / median ||x - y||_1`
/// * sigmoid: `tanh(a <x, y> + c)`, default `a = 1 / dim`, `c = 0`
/// * imq: `1 / sqrt(||x - y||^2 + c^2)`, default `c = 1`
/// * polynomial: `(a <x, y> + coef0)^degree`, default `a = 1 / dim`, `coef0 = 1`, degree 3
/// * cosine: `<x, y> / (||x|| ||y||)`, 0 when either vector is zero
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub gamma: Option<f64>,
    pub sigmoid_a: Option<f64>,
    pub sigmoid_c: f64,
    pub imq_c: f64,
    pub degree: u32,
    pub coef0: f64,
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec::new(KernelKind::Rbf)
    }
}

impl KernelSpec {
    pub fn new(kind: KernelKind) -> Self {
        KernelSpec {
            kind,
            gamma: None,
            sigmoid_a: None,
            sigmoid_c: 0.0,
            imq_c: 1.0,
            degree: 3,
            coef0: 1.0,
        }
    }

    pub fn all() -> Vec<KernelSpec> {
        KernelKind::ALL.into_iter().map(KernelSpec::new).collect()
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = Some(gamma);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(g) = self.gamma {
            if !(g > 0.0 && g.is_finite()) {
                return Err(Error::Config(format!(
                    "kernel bandwidth must be positive, got {g}"
                )));
            }
        }
        if self.degree < 1 {
            return Err(Error::Config("polynomial degree must be at least 1".into()));
        }
        if !(self.imq_c > 0.0) {
            return Err(Error::Config("imq constant must be positive".into()));
        }
        Ok(())
    }

    /// Fix every data-dependent default using the pooled sample `x ∪ y`.
    pub fn resolve(&self, x: &Tensor, y: &Tensor) -> Result<Kernel> {
        self.validate()?;
        let dim = x.item_len();
        if y.item_len() != dim {
            return Err(Error::Dimension(format!(
                "sample dims differ: {dim} vs {}",
                y.item_len()
            )));
        }
        let per_dim = 1.0 / dim.max(1) as f64;
        let param = match self.kind {
            KernelKind::Rbf | KernelKind::Laplacian => match self.gamma {
                Some(g) => g,
                None => {
                    let med = median_pairwise(x, y, self.kind == KernelKind::Laplacian);
                    // all points coincide: any bandwidth gives the same Gram matrix
                    if med > 0.0 {
                        1.0 / med
                    } else {
                        1.0
                    }
                }
            },
            KernelKind::Sigmoid | KernelKind::Polynomial => self.sigmoid_a.unwrap_or(per_dim),
            _ => 0.0,
        };
        Ok(Kernel { spec: *self, param })
    }
}

/// A kernel with all hyperparameters fixed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Kernel {
    spec: KernelSpec,
    /// Bandwidth for rbf/laplacian, inner-product scale for sigmoid/polynomial.
    param: f64,
}

impl Kernel {
    pub fn kind(&self) -> KernelKind {
        self.spec.kind
    }

    pub fn param(&self) -> f64 {
        self.param
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let s = &self.spec;
        match s.kind {
            KernelKind::Linear => dot(a, b),
            KernelKind::Rbf => (-self.param * sq_dist(a, b)).exp(),
            KernelKind::Laplacian => (-self.param * l1_dist(a, b)).exp(),
            KernelKind::Sigmoid => (self.param * dot(a, b) + s.sigmoid_c).tanh(),
            KernelKind::Imq => 1.0 / (sq_dist(a, b) + s.imq_c * s.imq_c).sqrt(),
            KernelKind::Polynomial => (self.param * dot(a, b) + s.coef0).powi(s.degree as i32),
            KernelKind::Cosine => {
                let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
                if na == 0.0 || nb == 0.0 {
                    0.0
                } else {
                    dot(a, b) / (na * nb)
                }
            }
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn l1_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Median over distinct pooled pairs of the squared euclidean (or l1) distance.
fn median_pairwise(x: &Tensor, y: &Tensor, l1: bool) -> f64 {
    let rows: Vec<&[f64]> = (0..x.batch())
        .map(|i| x.item_slice(i))
        .chain((0..y.batch()).map(|i| y.item_slice(i)))
        .collect();
    let mut d = Vec::with_capacity(rows.len() * rows.len().saturating_sub(1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            d.push(if l1 {
                l1_dist(rows[i], rows[j])
            } else {
                sq_dist(rows[i], rows[j])
            });
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    *m
}
