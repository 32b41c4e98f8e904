//! im2col convolution kernels on top of a blocked GEMM.
//!
//! Every output element's dot product runs over the same `k` ordering no
//! matter how many columns are in flight, so results for one batch item do
//! not depend on which other items share the call.

/// `c = a * b (+ c if accumulate)`. Strides are (row, column) in elements.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    (rsc, csc): (usize, usize),
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
        assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    }
    assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.kh
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.kw
    }

    /// Rows of the column matrix.
    pub fn k(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    /// Columns of the column matrix.
    pub fn n(&self) -> usize {
        self.batch * self.out_h() * self.out_w()
    }
}

/// Unfold `x` [B, Ci, H, W] into a [Ci*kh*kw, B*Ho*Wo] matrix.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let n = g.n();
    let mut cols = vec![0.0; g.k() * n];
    let hw = g.h * g.w;
    for ci in 0..g.c_in {
        for dy in 0..g.kh {
            for dx in 0..g.kw {
                let row = (ci * g.kh + dy) * g.kw + dx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for b in 0..g.batch {
                    let src = &x[(b * g.c_in + ci) * hw..(b * g.c_in + ci + 1) * hw];
                    for oy in 0..ho {
                        let iy = oy as isize + dy as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        let base = b * ho * wo + oy * wo;
                        for ox in 0..wo {
                            let ix = ox as isize + dx as isize - g.pad as isize;
                            if ix >= 0 && (ix as usize) < g.w {
                                dst[base + ox] = src[iy * g.w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: fold a column matrix back, summing overlaps.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let n = g.n();
    let hw = g.h * g.w;
    let mut x = vec![0.0; g.batch * g.c_in * hw];
    for ci in 0..g.c_in {
        for dy in 0..g.kh {
            for dx in 0..g.kw {
                let row = (ci * g.kh + dy) * g.kw + dx;
                let src = &cols[row * n..(row + 1) * n];
                for b in 0..g.batch {
                    let dst = &mut x[(b * g.c_in + ci) * hw..(b * g.c_in + ci + 1) * hw];
                    for oy in 0..ho {
                        let iy = oy as isize + dy as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        let base = b * ho * wo + oy * wo;
                        for ox in 0..wo {
                            let ix = ox as isize + dx as isize - g.pad as isize;
                            if ix >= 0 && (ix as usize) < g.w {
                                dst[iy * g.w + ix as usize] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// Reorder a [Co, B*P] matrix into [B, Co, P].
pub(crate) fn mat_to_nchw(mat: &[f64], batch: usize, co: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; batch * co * p];
    for c in 0..co {
        for b in 0..batch {
            out[(b * co + c) * p..(b * co + c + 1) * p]
                .copy_from_slice(&mat[c * batch * p + b * p..c * batch * p + (b + 1) * p]);
        }
    }
    out
}

/// Reorder [B, Co, P] into a [Co, B*P] matrix.
pub(crate) fn nchw_to_mat(x: &[f64], batch: usize, co: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; batch * co * p];
    for c in 0..co {
        for b in 0..batch {
            out[c * batch * p + b * p..c * batch * p + (b + 1) * p]
                .copy_from_slice(&x[(b * co + c) * p..(b * co + c + 1) * p]);
        }
    }
    out
}
