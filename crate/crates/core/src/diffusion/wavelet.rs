use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One value per single-level Haar sub-band.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct HaarBands {
    /// Approximation.
    pub ll: f64,
    /// Horizontal detail.
    pub lh: f64,
    /// Vertical detail.
    pub hl: f64,
    /// Diagonal detail.
    pub hh: f64,
}

impl HaarBands {
    pub fn sum(&self) -> f64 {
        self.ll + self.lh + self.hl + self.hh
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.ll, self.lh, self.hl, self.hh]
    }

    pub const NAMES: [&'static str; 4] = ["approximation", "horizontal", "vertical", "diagonal"];
}

/// Orthonormal single-level 2-D Haar transform of every `[H, W]` plane of
/// a `[B, C, H, W]` tensor. Returns `[ll, lh, hl, hh]`, each
/// `[B, C, H/2, W/2]`. For a 2x2 block `[[a, b], [c, d]]`:
/// `ll = (a+b+c+d)/2`, `lh = (a+b-c-d)/2`, `hl = (a-b+c-d)/2`,
/// `hh = (a-b-c+d)/2`.
pub fn haar2d(x: &Tensor) -> Result<[Tensor; 4]> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::Dimension(format!(
            "haar2d expects [B, C, H, W], got {s:?}"
        )));
    }
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Config(format!(
            "haar2d needs even spatial dims, got {h}x{w}"
        )));
    }
    let (h2, w2) = (h / 2, w / 2);
    let mut bands: [Vec<f64>; 4] = std::array::from_fn(|_| Vec::with_capacity(planes * h2 * w2));
    for p in 0..planes {
        let plane = &x.data()[p * h * w..(p + 1) * h * w];
        for i in 0..h2 {
            for j in 0..w2 {
                let a = plane[2 * i * w + 2 * j];
                let b = plane[2 * i * w + 2 * j + 1];
                let c = plane[(2 * i + 1) * w + 2 * j];
                let d = plane[(2 * i + 1) * w + 2 * j + 1];
                bands[0].push(0.5 * (a + b + c + d));
                bands[1].push(0.5 * (a + b - c - d));
                bands[2].push(0.5 * (a - b + c - d));
                bands[3].push(0.5 * (a - b - c + d));
            }
        }
    }
    let shape = [s[0], s[1], h2, w2];
    let [ll, lh, hl, hh] = bands;
    Ok([
        Tensor::new(&shape, ll)?,
        Tensor::new(&shape, lh)?,
        Tensor::new(&shape, hl)?,
        Tensor::new(&shape, hh)?,
    ])
}
