use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::kernels::{Kernel, KernelKind, KernelSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Baseline MMD values at or below this are treated as zero distance.
pub const MMD_GUARD: f64 = 1e-12;

fn check_sizes(x: &Tensor, y: &Tensor) -> Result<()> {
    if x.batch() < 2 || y.batch() < 2 {
        return Err(Error::Domain(format!(
            "unbiased MMD needs at least 2 samples per set, got {} and {}",
            x.batch(),
            y.batch()
        )));
    }
    if x.item_len() != y.item_len() {
        return Err(Error::Dimension(format!(
            "sample dims differ: {} vs {}",
            x.item_len(),
            y.item_len()
        )));
    }
    Ok(())
}

/// Sum of `k(a_i, a_j)` over ordered pairs `i != j`.
fn within_sum(a: &Tensor, k: &Kernel) -> f64 {
    let n = a.batch();
    let rows: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            (i + 1..n)
                .map(|j| k.eval(a.item_slice(i), a.item_slice(j)))
                .sum::<f64>()
        })
        .collect();
    2.0 * rows.iter().sum::<f64>()
}

fn cross_sum(a: &Tensor, b: &Tensor, k: &Kernel) -> f64 {
    // collected before summing so the result does not depend on scheduling
    let rows: Vec<f64> = (0..a.batch())
        .into_par_iter()
        .map(|i| {
            (0..b.batch())
                .map(|j| k.eval(a.item_slice(i), b.item_slice(j)))
                .sum::<f64>()
        })
        .collect();
    rows.iter().sum()
}

/// Unbiased squared-MMD estimate with an already resolved kernel. May be
/// negative.
pub fn mmd_with(x: &Tensor, y: &Tensor, k: &Kernel) -> Result<f64> {
    check_sizes(x, y)?;
    let (m, n) = (x.batch() as f64, y.batch() as f64);
    Ok(
        within_sum(x, k) / (m * (m - 1.0)) + within_sum(y, k) / (n * (n - 1.0))
            - 2.0 * cross_sum(x, y, k) / (m * n),
    )
}

/// Unbiased squared-MMD estimate; data-dependent kernel defaults are fixed
/// on the pooled sample. Rows of `x` and `y` are the samples.
pub fn mmd_unbiased(x: &Tensor, y: &Tensor, kernel: &KernelSpec) -> Result<f64> {
    check_sizes(x, y)?;
    let k = kernel.resolve(x, y)?;
    mmd_with(x, y, &k)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PermutationTest {
    pub statistic: f64,
    /// Null-distribution draws in permutation order.
    pub null: Vec<f64>,
    /// `(1 + #{null >= statistic}) / (1 + permutations)`.
    pub p_value: f64,
}

impl PermutationTest {
    /// Empirical `q`-quantile of the null draws.
    pub fn null_quantile(&self, q: f64) -> f64 {
        let mut v = self.null.clone();
        v.sort_by(f64::total_cmp);
        let idx = ((v.len() as f64 - 1.0) * q.clamp(0.0, 1.0)).round() as usize;
        v[idx]
    }
}

/// Two-sample permutation test on the unbiased MMD. The kernel is resolved
/// once on the pooled sample, which every permutation shares.
pub fn permutation_test(
    x: &Tensor,
    y: &Tensor,
    kernel: &KernelSpec,
    permutations: usize,
    seed: u64,
) -> Result<PermutationTest> {
    check_sizes(x, y)?;
    if permutations == 0 {
        return Err(Error::Config(
            "permutation test needs at least one permutation".into(),
        ));
    }
    let k = kernel.resolve(x, y)?;
    let pooled = Tensor::stack(&[x.clone(), y.clone()])?;
    let (m, n) = (x.batch(), y.batch());
    let total = m + n;
    // pooled Gram matrix, upper triangle row-major
    let gram: Vec<Vec<f64>> = (0..total)
        .into_par_iter()
        .map(|i| {
            (i + 1..total)
                .map(|j| k.eval(pooled.item_slice(i), pooled.item_slice(j)))
                .collect()
        })
        .collect();
    let stat_for = |in_x: &[bool]| {
        let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
        for i in 0..total {
            for (off, &v) in gram[i].iter().enumerate() {
                let j = i + 1 + off;
                match (in_x[i], in_x[j]) {
                    (true, true) => sxx += v,
                    (false, false) => syy += v,
                    _ => sxy += v,
                }
            }
        }
        let (mf, nf) = (m as f64, n as f64);
        2.0 * sxx / (mf * (mf - 1.0)) + 2.0 * syy / (nf * (nf - 1.0)) - 2.0 * sxy / (mf * nf)
    };
    let mut labels: Vec<bool> = (0..total).map(|i| i < m).collect();
    let statistic = stat_for(&labels);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut orders = Vec::with_capacity(permutations);
    for _ in 0..permutations {
        labels.shuffle(&mut rng);
        orders.push(labels.clone());
    }
    let null: Vec<f64> = orders.par_iter().map(|l| stat_for(l)).collect();
    let exceed = null.iter().filter(|&&v| v >= statistic).count();
    let p_value = (1 + exceed) as f64 / (1 + permutations) as f64;
    Ok(PermutationTest {
        statistic,
        null,
        p_value,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelativeMmd {
    pub kernel: KernelKind,
    pub baseline: f64,
    pub tuned: f64,
    /// `tuned / baseline`; `None` when the baseline distance is not
    /// positive, i.e. indistinguishable from zero.
    pub ratio: Option<f64>,
}

/// Per-kernel MMD of tuned and baseline samples to a reference set,
/// normalized so the baseline is 1. Both comparisons use the same kernel,
/// resolved on the pooled baseline and reference samples.
pub fn relative_mmd_table(
    baseline: &Tensor,
    tuned: &Tensor,
    reference: &Tensor,
    kernels: &[KernelSpec],
) -> Result<Vec<RelativeMmd>> {
    if baseline.shape() != tuned.shape() || baseline.batch() != reference.batch() {
        return Err(Error::Dimension(
            "relative MMD needs equal sample counts and shapes".into(),
        ));
    }
    let same_as_reference = baseline.bit_eq(reference);
    kernels
        .iter()
        .map(|spec| {
            let k = spec.resolve(baseline, reference)?;
            let b = mmd_with(baseline, reference, &k)?;
            let t = mmd_with(tuned, reference, &k)?;
            let ratio = if same_as_reference || b <= MMD_GUARD {
                None
            } else {
                Some(t / b)
            };
            Ok(RelativeMmd {
                kernel: spec.kind,
                baseline: b,
                tuned: t,
                ratio,
            })
        })
        .collect()
}
