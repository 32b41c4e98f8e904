//! Independent oracles shared by the integration and acceptance suites.
#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use skiptune::{Result, Tape, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Central-difference gradient of a scalar function of several tensors.
pub fn numeric_grad<F>(f: &F, inputs: &[Tensor], which: usize, step: f64) -> Tensor
where
    F: Fn(&[Tensor]) -> f64,
{
    let mut grad = Tensor::zeros(inputs[which].shape());
    for i in 0..inputs[which].len() {
        let mut plus = inputs.to_vec();
        plus[which].data_mut()[i] += step;
        let mut minus = inputs.to_vec();
        minus[which].data_mut()[i] -= step;
        grad.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * step);
    }
    grad
}

/// Worst relative discrepancy `|a - n| / max(1, |a|, |n|)` between the tape
/// gradient and central differences, over every input.
pub fn gradcheck<G>(build: G, inputs: &[Tensor], step: f64) -> Result<f64>
where
    G: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&tape, &vars)?;
    let grads = tape.backward(&out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get_or_zeros(v)).collect();

    let eval = |xs: &[Tensor]| -> f64 {
        let t = Tape::inference();
        let vs: Vec<Var<'_>> = xs.iter().map(|x| t.constant(x.clone())).collect();
        build(&t, &vs)
            .expect("forward")
            .value()
            .item()
            .expect("scalar")
    };
    let mut worst: f64 = 0.0;
    for (w, a) in analytic.iter().enumerate() {
        let n = numeric_grad(&eval, inputs, w, step);
        for (x, y) in a.data().iter().zip(n.data()) {
            let rel = (x - y).abs() / 1f64.max(x.abs()).max(y.abs());
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Contract a tensor-valued output to a scalar with fixed random weights.
pub fn project<'t>(y: &Var<'t>, seed: u64) -> Result<Var<'t>> {
    let w = Tensor::randn(y.shape(), &mut rng(seed));
    y.mul(&y.tape().constant(w)).map(|p| p.sum())
}
