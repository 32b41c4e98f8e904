use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skip_tuning::SkipProfile;
use crate::tensor::{Tape, Tensor, Var};
use crate::unet::{MiniUNet, SkipControl};

/// How the vector-valued network output is reduced before differentiating.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scalarization {
    /// Gradient of the sum of output components.
    #[default]
    OutputSum,
    /// Frobenius norm of the per-item Jacobian.
    JacobianFrobenius,
}

fn per_item_norms(g: &Tensor) -> Vec<f64> {
    (0..g.batch())
        .map(|b| g.item_slice(b).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

/// Batch mean of `||d sum(y_b) / d x_b||` for one already built graph.
///
/// Items must not interact inside the graph, so that one backward pass
/// yields every per-item gradient.
pub fn output_sum_gradient_norm(x: &Var<'_>, y: &Var<'_>) -> Result<f64> {
    if !x.requires_grad() {
        return Err(Error::Contract(
            "probe input does not carry a gradient tape".into(),
        ));
    }
    let grads = x.tape().backward(&y.sum())?;
    let norms = per_item_norms(&grads.get_or_zeros(x));
    Ok(norms.iter().sum::<f64>() / norms.len().max(1) as f64)
}

/// Gradient-norm probe of an arbitrary batched map `f`. The map is rebuilt
/// on a fresh tape for every backward pass it needs.
pub fn gradient_norm<F>(x: &Tensor, scalarization: Scalarization, f: F) -> Result<f64>
where
    F: for<'t> Fn(&Var<'t>) -> Result<Var<'t>>,
{
    if x.batch() == 0 {
        return Err(Error::Domain(
            "gradient probe needs a nonempty batch".into(),
        ));
    }
    match scalarization {
        Scalarization::OutputSum => {
            let tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let y = f(&xv)?;
            output_sum_gradient_norm(&xv, &y)
        }
        Scalarization::JacobianFrobenius => {
            let mut sq = vec![0.0; x.batch()];
            let mut j = 0;
            loop {
                let tape = Tape::new();
                let xv = tape.leaf(x.clone());
                let y = f(&xv)?;
                let per = y.value().item_len();
                if j == per {
                    break;
                }
                let mut sel = Tensor::zeros(y.shape());
                for b in 0..y.value().batch() {
                    sel.data_mut()[b * per + j] = 1.0;
                }
                let root = y.mul(&tape.constant(sel))?.sum();
                let g = tape.backward(&root)?.get_or_zeros(&xv);
                for (acc, n) in sq.iter_mut().zip(per_item_norms(&g)) {
                    *acc += n * n;
                }
                j += 1;
            }
            Ok(sq.iter().map(|v| v.sqrt()).sum::<f64>() / sq.len() as f64)
        }
    }
}

/// `E_x ||grad_x D(x; sigma)||` for the denoiser under an optional skip
/// profile.
pub fn gradient_norm_probe(
    net: &MiniUNet,
    x: &Tensor,
    sigma: f64,
    profile: Option<&SkipProfile>,
    scalarization: Scalarization,
) -> Result<f64> {
    let sig = vec![sigma; x.batch()];
    let control = profile.map_or(SkipControl::Off, SkipControl::Profile);
    gradient_norm(x, scalarization, |xv| {
        let pv = net.params().vars(xv.tape(), false);
        Ok(net.forward_var(&pv, xv, &sig, None, control, false)?.0)
    })
}
