use super::conv::{col2im, gemm, im2col, mat_to_nchw, nchw_to_mat, ConvGeom};
use super::{Tensor, Var};
use crate::error::{Error, Result};

/// GroupNorm variance floor, applied relative to the group's mean square.
pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Channel partition used by [`Var::group_norm`].
///
/// Channel `c` belongs to group `((c + offset) % C) / (C / groups)`. A
/// nonzero offset rotates the partition so that groups straddle a channel
/// boundary that a plain partition would respect.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupNormSpec {
    pub groups: usize,
    pub offset: usize,
}

impl GroupNormSpec {
    pub fn new(groups: usize) -> Self {
        GroupNormSpec { groups, offset: 0 }
    }

    pub fn with_offset(groups: usize, offset: usize) -> Self {
        GroupNormSpec { groups, offset }
    }

    /// Channel lists per group.
    pub fn partition(&self, channels: usize) -> Result<Vec<Vec<usize>>> {
        if self.groups == 0 || !channels.is_multiple_of(self.groups) {
            return Err(Error::Config(format!(
                "{} groups do not divide {} channels",
                self.groups, channels
            )));
        }
        let size = channels / self.groups;
        let mut parts = vec![Vec::with_capacity(size); self.groups];
        for c in 0..channels {
            parts[((c + self.offset) % channels) / size].push(c);
        }
        Ok(parts)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn nchw(t: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    t.expect_rank(4, what)?;
    let s = t.shape();
    Ok((s[0], s[1], s[2], s[3]))
}

struct GroupStats {
    mean: f64,
    denom: f64,
}

/// Mean and `sqrt(var + eps * mean_square)` over the listed values.
fn group_stats(vals: impl Iterator<Item = f64> + Clone, n: usize) -> GroupStats {
    let mean = vals.clone().sum::<f64>() / n as f64;
    let var = vals.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let ms = var + mean * mean;
    GroupStats {
        mean,
        denom: (var + GROUP_NORM_EPS * ms).sqrt(),
    }
}

impl<'t> Var<'t> {
    fn binary_same_shape(&self, other: &Var<'t>) -> Result<()> {
        self.value.expect_same_shape(&other.value)
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary_same_shape(other)?;
        let v = self.value.add(&other.value)?;
        Ok(self.tape.record(v, &[self, other], || {
            Box::new(|g| vec![Some(g.clone()), Some(g.clone())])
        }))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary_same_shape(other)?;
        let v = self.value.sub(&other.value)?;
        Ok(self.tape.record(v, &[self, other], || {
            Box::new(|g| vec![Some(g.clone()), Some(g.scale(-1.0))])
        }))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary_same_shape(other)?;
        let v = self.value.zip_map(&other.value, |a, b| a * b)?;
        let (a, b) = (self.value.clone(), other.value.clone());
        Ok(self.tape.record(v, &[self, other], move || {
            Box::new(move |g| {
                vec![
                    Some(g.zip_map(&b, |g, b| g * b).expect("shape")),
                    Some(g.zip_map(&a, |g, a| g * a).expect("shape")),
                ]
            })
        }))
    }

    pub fn mul_scalar(&self, c: f64) -> Var<'t> {
        let v = self.value.scale(c);
        self.tape.record(v, &[self], move || {
            Box::new(move |g| vec![Some(g.scale(c))])
        })
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        let v = self.value.map(|x| x + c);
        self.tape
            .record(v, &[self], || Box::new(|g| vec![Some(g.clone())]))
    }

    /// Multiply every element by a single-element variable.
    pub fn scale_by(&self, s: &Var<'t>) -> Result<Var<'t>> {
        let c = s.value.item()?;
        let v = self.value.scale(c);
        let a = self.value.clone();
        let s_shape = s.value.shape().to_vec();
        Ok(self.tape.record(v, &[self, s], move || {
            Box::new(move |g| {
                let ds: f64 = g.data().iter().zip(a.data()).map(|(g, a)| g * a).sum();
                vec![Some(g.scale(c)), Some(Tensor::full(&s_shape, ds))]
            })
        }))
    }

    pub fn silu(&self) -> Var<'t> {
        let v = self.value.map(|x| x * sigmoid(x));
        let x = self.value.clone();
        self.tape.record(v, &[self], move || {
            Box::new(move |g| {
                let d = g
                    .zip_map(&x, |g, x| {
                        let s = sigmoid(x);
                        g * s * (1.0 + x * (1.0 - s))
                    })
                    .expect("shape");
                vec![Some(d)]
            })
        })
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let v = self.value.map(sigmoid);
        let y = v.clone();
        self.tape.record(v, &[self], move || {
            Box::new(move |g| {
                vec![Some(
                    g.zip_map(&y, |g, y| g * y * (1.0 - y)).expect("shape"),
                )]
            })
        })
    }

    pub fn sum(&self) -> Var<'t> {
        let v = Tensor::scalar(self.value.sum());
        let shape = self.value.shape().to_vec();
        self.tape.record(v, &[self], move || {
            Box::new(move |g| vec![Some(Tensor::full(&shape, g.data()[0]))])
        })
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value.len().max(1) as f64;
        self.sum().mul_scalar(1.0 / n)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value.as_ref().clone().reshape(shape)?;
        let orig = self.value.shape().to_vec();
        Ok(self.tape.record(v, &[self], move || {
            Box::new(move |g| vec![Some(g.clone().reshape(&orig).expect("reshape"))])
        }))
    }

    /// [M, K] x [K, N].
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.value.expect_rank(2, "matmul")?;
        other.value.expect_rank(2, "matmul")?;
        let (m, k) = (self.value.shape()[0], self.value.shape()[1]);
        let (k2, n) = (other.value.shape()[0], other.value.shape()[1]);
        if k != k2 {
            return Err(Error::Dimension(format!("matmul inner dims {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value.data(),
            (k, 1),
            other.value.data(),
            (n, 1),
            &mut out,
            (n, 1),
            false,
        );
        let (a, b) = (self.value.clone(), other.value.clone());
        Ok(self
            .tape
            .record(Tensor::new(&[m, n], out)?, &[self, other], move || {
                Box::new(move |g| {
                    let mut ga = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        g.data(),
                        (n, 1),
                        b.data(),
                        (1, n),
                        &mut ga,
                        (k, 1),
                        false,
                    );
                    let mut gb = vec![0.0; k * n];
                    gemm(
                        k,
                        m,
                        n,
                        a.data(),
                        (1, k),
                        g.data(),
                        (n, 1),
                        &mut gb,
                        (n, 1),
                        false,
                    );
                    vec![
                        Some(Tensor::new(&[m, k], ga).expect("shape")),
                        Some(Tensor::new(&[k, n], gb).expect("shape")),
                    ]
                })
            }))
    }

    /// `x [B, In] * w[Out, In]^T + b[Out]`.
    pub fn linear(&self, w: &Var<'t>, b: Option<&Var<'t>>) -> Result<Var<'t>> {
        self.value.expect_rank(2, "linear")?;
        w.value.expect_rank(2, "linear weight")?;
        let (bs, fin) = (self.value.shape()[0], self.value.shape()[1]);
        let fout = w.value.shape()[0];
        if w.value.shape()[1] != fin {
            return Err(Error::Dimension(format!(
                "linear: input {fin} vs weight {:?}",
                w.value.shape()
            )));
        }
        if let Some(b) = b {
            if b.value.shape() != [fout] {
                return Err(Error::Dimension(format!(
                    "linear bias {:?}",
                    b.value.shape()
                )));
            }
        }
        let mut out = vec![0.0; bs * fout];
        if let Some(b) = b {
            for row in out.chunks_mut(fout) {
                row.copy_from_slice(b.value.data());
            }
        }
        gemm(
            bs,
            fin,
            fout,
            self.value.data(),
            (fin, 1),
            w.value.data(),
            (1, fin),
            &mut out,
            (fout, 1),
            b.is_some(),
        );
        let (x, wv) = (self.value.clone(), w.value.clone());
        let has_bias = b.is_some();
        let mut parents = vec![self, w];
        if let Some(b) = b {
            parents.push(b);
        }
        Ok(self
            .tape
            .record(Tensor::new(&[bs, fout], out)?, &parents, move || {
                Box::new(move |g| {
                    let mut gx = vec![0.0; bs * fin];
                    gemm(
                        bs,
                        fout,
                        fin,
                        g.data(),
                        (fout, 1),
                        wv.data(),
                        (fin, 1),
                        &mut gx,
                        (fin, 1),
                        false,
                    );
                    let mut gw = vec![0.0; fout * fin];
                    gemm(
                        fout,
                        bs,
                        fin,
                        g.data(),
                        (1, fout),
                        x.data(),
                        (fin, 1),
                        &mut gw,
                        (fin, 1),
                        false,
                    );
                    let mut res = vec![
                        Some(Tensor::new(&[bs, fin], gx).expect("shape")),
                        Some(Tensor::new(&[fout, fin], gw).expect("shape")),
                    ];
                    if has_bias {
                        let mut gb = vec![0.0; fout];
                        for row in g.data().chunks(fout) {
                            for (a, v) in gb.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                        res.push(Some(Tensor::from_vec(gb)));
                    }
                    res
                })
            }))
    }

    /// Stride-1 convolution, `x [B, Ci, H, W]`, `w [Co, Ci, kh, kw]`.
    pub fn conv2d(&self, w: &Var<'t>, b: Option<&Var<'t>>, pad: usize) -> Result<Var<'t>> {
        let (batch, ci, h, wd) = nchw(&self.value, "conv2d")?;
        w.value.expect_rank(4, "conv2d weight")?;
        let ws = w.value.shape();
        let (co, kh, kw) = (ws[0], ws[2], ws[3]);
        if ws[1] != ci {
            return Err(Error::Dimension(format!(
                "conv2d: input has {ci} channels, weight {:?}",
                ws
            )));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::Dimension(format!(
                "conv2d kernel {kh}x{kw} exceeds padded input"
            )));
        }
        if let Some(b) = b {
            if b.value.shape() != [co] {
                return Err(Error::Dimension(format!(
                    "conv2d bias {:?}",
                    b.value.shape()
                )));
            }
        }
        let geom = ConvGeom {
            batch,
            c_in: ci,
            h,
            w: wd,
            kh,
            kw,
            pad,
        };
        let (ho, wo) = (geom.out_h(), geom.out_w());
        let (k, n) = (geom.k(), geom.n());
        let cols = im2col(self.value.data(), &geom);
        let mut mat = vec![0.0; co * n];
        if let Some(b) = b {
            for (c, row) in mat.chunks_mut(n).enumerate() {
                row.fill(b.value.data()[c]);
            }
        }
        gemm(
            co,
            k,
            n,
            w.value.data(),
            (k, 1),
            &cols,
            (n, 1),
            &mut mat,
            (n, 1),
            b.is_some(),
        );
        let out = Tensor::new(&[batch, co, ho, wo], mat_to_nchw(&mat, batch, co, ho * wo))?;

        let wv = w.value.clone();
        let has_bias = b.is_some();
        let mut parents = vec![self, w];
        if let Some(b) = b {
            parents.push(b);
        }
        let w_shape = ws.to_vec();
        Ok(self.tape.record(out, &parents, move || {
            Box::new(move |g| {
                let gm = nchw_to_mat(g.data(), batch, co, ho * wo);
                let mut gw = vec![0.0; co * k];
                gemm(co, n, k, &gm, (n, 1), &cols, (1, n), &mut gw, (k, 1), false);
                let mut gcols = vec![0.0; k * n];
                gemm(
                    k,
                    co,
                    n,
                    wv.data(),
                    (1, k),
                    &gm,
                    (n, 1),
                    &mut gcols,
                    (n, 1),
                    false,
                );
                let gx = col2im(&gcols, &geom);
                let mut res = vec![
                    Some(Tensor::new(&[batch, ci, h, wd], gx).expect("shape")),
                    Some(Tensor::new(&w_shape, gw).expect("shape")),
                ];
                if has_bias {
                    let gb = gm.chunks(n).map(|r| r.iter().sum()).collect();
                    res.push(Some(Tensor::from_vec(gb)));
                }
                res
            })
        }))
    }

    /// 2x2 average pooling.
    pub fn avg_pool2(&self) -> Result<Var<'t>> {
        let (b, c, h, w) = nchw(&self.value, "avg_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Dimension(format!(
                "avg_pool2 needs even spatial dims, got {h}x{w}"
            )));
        }
        let (ho, wo) = (h / 2, w / 2);
        let x = self.value.data();
        let mut out = vec![0.0; b * c * ho * wo];
        for p in 0..b * c {
            for y in 0..ho {
                for xx in 0..wo {
                    let i = p * h * w + 2 * y * w + 2 * xx;
                    out[p * ho * wo + y * wo + xx] =
                        0.25 * (x[i] + x[i + 1] + x[i + w] + x[i + w + 1]);
                }
            }
        }
        Ok(self
            .tape
            .record(Tensor::new(&[b, c, ho, wo], out)?, &[self], move || {
                Box::new(move |g| {
                    let mut gx = vec![0.0; b * c * h * w];
                    let gd = g.data();
                    for p in 0..b * c {
                        for y in 0..ho {
                            for xx in 0..wo {
                                let v = 0.25 * gd[p * ho * wo + y * wo + xx];
                                let i = p * h * w + 2 * y * w + 2 * xx;
                                gx[i] += v;
                                gx[i + 1] += v;
                                gx[i + w] += v;
                                gx[i + w + 1] += v;
                            }
                        }
                    }
                    vec![Some(Tensor::new(&[b, c, h, w], gx).expect("shape"))]
                })
            }))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&self) -> Result<Var<'t>> {
        let (b, c, h, w) = nchw(&self.value, "upsample2")?;
        let (ho, wo) = (2 * h, 2 * w);
        let x = self.value.data();
        let mut out = vec![0.0; b * c * ho * wo];
        for p in 0..b * c {
            for y in 0..ho {
                for xx in 0..wo {
                    out[p * ho * wo + y * wo + xx] = x[p * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        Ok(self
            .tape
            .record(Tensor::new(&[b, c, ho, wo], out)?, &[self], move || {
                Box::new(move |g| {
                    let mut gx = vec![0.0; b * c * h * w];
                    let gd = g.data();
                    for p in 0..b * c {
                        for y in 0..ho {
                            for xx in 0..wo {
                                gx[p * h * w + (y / 2) * w + xx / 2] +=
                                    gd[p * ho * wo + y * wo + xx];
                            }
                        }
                    }
                    vec![Some(Tensor::new(&[b, c, h, w], gx).expect("shape"))]
                })
            }))
    }

    /// Group normalization with affine `gamma`, `beta` (both `[C]`).
    ///
    /// `input_scale` (`[B, C]`) multiplies the input before normalization.
    /// Where it is constant across a group the factor cancels exactly
    /// (the variance floor is relative to the mean square), so that group is
    /// normalized from the unscaled values.
    pub fn group_norm(
        &self,
        spec: &GroupNormSpec,
        gamma: &Var<'t>,
        beta: &Var<'t>,
        input_scale: Option<&Var<'t>>,
    ) -> Result<Var<'t>> {
        let (b, c, h, w) = nchw(&self.value, "group_norm")?;
        let parts = spec.partition(c)?;
        if gamma.value.shape() != [c] || beta.value.shape() != [c] {
            return Err(Error::Dimension(format!(
                "group_norm affine params must be [{c}], got {:?} / {:?}",
                gamma.value.shape(),
                beta.value.shape()
            )));
        }
        if let Some(s) = input_scale {
            if s.value.shape() != [b, c] {
                return Err(Error::Dimension(format!(
                    "group_norm input scale must be [{b}, {c}], got {:?}",
                    s.value.shape()
                )));
            }
        }
        let hw = h * w;
        let x = self.value.data();
        let scale = input_scale.map(|s| s.value.clone());
        let (gam, bet) = (gamma.value.data(), beta.value.data());
        let mut out = vec![0.0; x.len()];
        let mut normed = vec![0.0; x.len()];
        for bi in 0..b {
            for chans in &parts {
                let n = chans.len() * hw;
                let factors: Option<Vec<f64>> = scale.as_ref().and_then(|s| {
                    let row = &s.data()[bi * c..(bi + 1) * c];
                    let f0 = row[chans[0]];
                    let uniform = chans.iter().all(|&ch| row[ch].to_bits() == f0.to_bits());
                    (!uniform).then(|| chans.iter().map(|&ch| row[ch]).collect())
                });
                let value_at = |j: usize, ch: usize, p: usize| -> f64 {
                    let v = x[(bi * c + ch) * hw + p];
                    match &factors {
                        Some(f) => v * f[j],
                        None => v,
                    }
                };
                let iter = chans
                    .iter()
                    .enumerate()
                    .flat_map(|(j, &ch)| (0..hw).map(move |p| (j, ch, p)))
                    .map(|(j, ch, p)| value_at(j, ch, p));
                let st = group_stats(iter, n);
                for (j, &ch) in chans.iter().enumerate() {
                    for p in 0..hw {
                        let idx = (bi * c + ch) * hw + p;
                        let nv = if st.denom > 0.0 {
                            (value_at(j, ch, p) - st.mean) / st.denom
                        } else {
                            0.0
                        };
                        normed[idx] = nv;
                        out[idx] = gam[ch] * nv + bet[ch];
                    }
                }
            }
        }
        let xv = self.value.clone();
        let gv = gamma.value.clone();
        let shape = self.value.shape().to_vec();
        let mut parents = vec![self, gamma, beta];
        if let Some(s) = input_scale {
            parents.push(s);
        }
        Ok(self
            .tape
            .record(Tensor::new(&shape, out)?, &parents, move || {
                Box::new(move |g| {
                    let gd = g.data();
                    let x = xv.data();
                    let gam = gv.data();
                    let mut gx = vec![0.0; x.len()];
                    let mut ggam = vec![0.0; c];
                    let mut gbet = vec![0.0; c];
                    let mut gscale = scale.as_ref().map(|_| vec![0.0; b * c]);
                    for bi in 0..b {
                        for chans in &parts {
                            let n = (chans.len() * hw) as f64;
                            let s_of =
                                |ch: usize| scale.as_ref().map_or(1.0, |s| s.data()[bi * c + ch]);
                            // statistics of the scaled input
                            let mut xs = Vec::with_capacity(chans.len() * hw);
                            let mut gp = Vec::with_capacity(chans.len() * hw);
                            for &ch in chans {
                                for p in 0..hw {
                                    let idx = (bi * c + ch) * hw + p;
                                    xs.push(x[idx] * s_of(ch));
                                    gp.push(gd[idx] * gam[ch]);
                                    ggam[ch] += gd[idx] * normed[idx];
                                    gbet[ch] += gd[idx];
                                }
                            }
                            let st = group_stats(xs.iter().copied(), xs.len());
                            if st.denom <= 0.0 {
                                continue;
                            }
                            let s = st.denom;
                            let mean_g = gp.iter().sum::<f64>() / n;
                            let dot: f64 = gp.iter().zip(&xs).map(|(g, v)| g * (v - st.mean)).sum();
                            let coef = dot / (n * s * s * s);
                            for (j, &ch) in chans.iter().enumerate() {
                                let sc = s_of(ch);
                                for p in 0..hw {
                                    let t = j * hw + p;
                                    let idx = (bi * c + ch) * hw + p;
                                    let v = xs[t];
                                    let dxs = (gp[t] - mean_g) / s
                                        - coef * ((v - st.mean) + GROUP_NORM_EPS * v);
                                    gx[idx] = dxs * sc;
                                    if let Some(gs) = gscale.as_mut() {
                                        gs[bi * c + ch] += dxs * x[idx];
                                    }
                                }
                            }
                        }
                    }
                    let mut res = vec![
                        Some(Tensor::new(&shape, gx).expect("shape")),
                        Some(Tensor::from_vec(ggam)),
                        Some(Tensor::from_vec(gbet)),
                    ];
                    if let Some(gs) = gscale {
                        res.push(Some(Tensor::new(&[b, c], gs).expect("shape")));
                    }
                    res
                })
            }))
    }

    /// Concatenate `[self, other]` along the channel axis.
    pub fn concat_channels(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (b, ca, h, w) = nchw(&self.value, "concat_channels")?;
        let (b2, cb, h2, w2) = nchw(&other.value, "concat_channels")?;
        if (b, h, w) != (b2, h2, w2) {
            return Err(Error::Dimension(format!(
                "concat_channels {:?} vs {:?}",
                self.value.shape(),
                other.value.shape()
            )));
        }
        let hw = h * w;
        let c = ca + cb;
        let mut out = Vec::with_capacity(b * c * hw);
        for bi in 0..b {
            out.extend_from_slice(&self.value.data()[bi * ca * hw..(bi + 1) * ca * hw]);
            out.extend_from_slice(&other.value.data()[bi * cb * hw..(bi + 1) * cb * hw]);
        }
        Ok(self.tape.record(
            Tensor::new(&[b, c, h, w], out)?,
            &[self, other],
            move || {
                Box::new(move |g| {
                    let mut ga = Vec::with_capacity(b * ca * hw);
                    let mut gb = Vec::with_capacity(b * cb * hw);
                    for bi in 0..b {
                        let row = &g.data()[bi * c * hw..(bi + 1) * c * hw];
                        ga.extend_from_slice(&row[..ca * hw]);
                        gb.extend_from_slice(&row[ca * hw..]);
                    }
                    vec![
                        Some(Tensor::new(&[b, ca, h, w], ga).expect("shape")),
                        Some(Tensor::new(&[b, cb, h, w], gb).expect("shape")),
                    ]
                })
            },
        ))
    }

    /// Multiply channel `c` of item `b` by `s[b, c]`.
    pub fn scale_channels(&self, s: &Var<'t>) -> Result<Var<'t>> {
        let (b, c, h, w) = nchw(&self.value, "scale_channels")?;
        if s.value.shape() != [b, c] {
            return Err(Error::Dimension(format!(
                "scale_channels needs [{b}, {c}], got {:?}",
                s.value.shape()
            )));
        }
        let hw = h * w;
        let x = self.value.clone();
        let sv = s.value.clone();
        let mut out = x.as_ref().clone();
        for (i, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
            let f = sv.data()[i];
            chunk.iter_mut().for_each(|v| *v *= f);
        }
        Ok(self.tape.record(out, &[self, s], move || {
            Box::new(move |g| {
                let mut gx = g.clone();
                let mut gs = vec![0.0; b * c];
                for (i, chunk) in gx.data_mut().chunks_mut(hw).enumerate() {
                    let xs = &x.data()[i * hw..(i + 1) * hw];
                    gs[i] = chunk.iter().zip(xs).map(|(g, x)| g * x).sum();
                    let f = sv.data()[i];
                    chunk.iter_mut().for_each(|v| *v *= f);
                }
                vec![Some(gx), Some(Tensor::new(&[b, c], gs).expect("shape"))]
            })
        }))
    }

    /// Add `e[b, c]` to every spatial position of channel `c`, item `b`.
    pub fn add_channelwise(&self, e: &Var<'t>) -> Result<Var<'t>> {
        let (b, c, h, w) = nchw(&self.value, "add_channelwise")?;
        if e.value.shape() != [b, c] {
            return Err(Error::Dimension(format!(
                "add_channelwise needs [{b}, {c}], got {:?}",
                e.value.shape()
            )));
        }
        let hw = h * w;
        let mut out = self.value.as_ref().clone();
        for (i, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
            let f = e.value.data()[i];
            chunk.iter_mut().for_each(|v| *v += f);
        }
        Ok(self.tape.record(out, &[self, e], move || {
            Box::new(move |g| {
                let ge = g.data().chunks(hw).map(|ch| ch.iter().sum()).collect();
                vec![
                    Some(g.clone()),
                    Some(Tensor::new(&[b, c], ge).expect("shape")),
                ]
            })
        }))
    }

    /// Multiply item `b` by the constant `s[b]`.
    pub fn scale_samples(&self, s: &[f64]) -> Result<Var<'t>> {
        let b = self.value.batch();
        if s.len() != b {
            return Err(Error::Dimension(format!(
                "scale_samples: {} factors for batch {b}",
                s.len()
            )));
        }
        let n = self.value.item_len();
        let mut out = self.value.as_ref().clone();
        for (chunk, f) in out.data_mut().chunks_mut(n.max(1)).zip(s) {
            chunk.iter_mut().for_each(|v| *v *= f);
        }
        let s = s.to_vec();
        Ok(self.tape.record(out, &[self], move || {
            Box::new(move |g| {
                let mut gx = g.clone();
                for (chunk, f) in gx.data_mut().chunks_mut(n.max(1)).zip(&s) {
                    chunk.iter_mut().for_each(|v| *v *= f);
                }
                vec![Some(gx)]
            })
        }))
    }

    /// `(1/B) * sum_b w[b] * ||x_b||^2`.
    pub fn weighted_sq_mean(&self, weights: &[f64]) -> Result<Var<'t>> {
        let b = self.value.batch();
        if weights.len() != b || b == 0 {
            return Err(Error::Dimension(format!(
                "weighted_sq_mean: {} weights for batch {b}",
                weights.len()
            )));
        }
        let n = self.value.item_len();
        let total: f64 = (0..b)
            .map(|i| weights[i] * self.value.item_slice(i).iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            / b as f64;
        let x = self.value.clone();
        let w = weights.to_vec();
        Ok(self.tape.record(Tensor::scalar(total), &[self], move || {
            Box::new(move |g| {
                let g0 = g.data()[0];
                let mut gx = x.as_ref().clone();
                for (i, chunk) in gx.data_mut().chunks_mut(n.max(1)).enumerate() {
                    let f = 2.0 * g0 * w[i] / b as f64;
                    chunk.iter_mut().for_each(|v| *v *= f);
                }
                vec![Some(gx)]
            })
        }))
    }

    /// Mean negative log-likelihood of `labels` under softmax(`self` [B, K]).
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var<'t>> {
        self.value.expect_rank(2, "cross_entropy")?;
        let (b, k) = (self.value.shape()[0], self.value.shape()[1]);
        if labels.len() != b || labels.iter().any(|&l| l >= k) {
            return Err(Error::Dimension(
                "cross_entropy labels do not match logits".into(),
            ));
        }
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for i in 0..b {
            let row = &self.value.data()[i * k..(i + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for j in 0..k {
                probs[i * k + j] = (row[j] - m).exp() / z;
            }
            loss -= row[labels[i]] - m - z.ln();
        }
        loss /= b as f64;
        let labels = labels.to_vec();
        Ok(self.tape.record(Tensor::scalar(loss), &[self], move || {
            Box::new(move |g| {
                let g0 = g.data()[0] / b as f64;
                let mut gx = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    gx[i * k + l] -= 1.0;
                }
                gx.iter_mut().for_each(|v| *v *= g0);
                vec![Some(Tensor::new(&[b, k], gx).expect("shape"))]
            })
        }))
    }

    /// Element `i` of a rank-1 variable, as a scalar.
    pub fn index(&self, i: usize) -> Result<Var<'t>> {
        self.value.expect_rank(1, "index")?;
        let n = self.value.len();
        if i >= n {
            return Err(Error::Dimension(format!("index {i} out of {n}")));
        }
        let v = Tensor::scalar(self.value.data()[i]);
        Ok(self.tape.record(v, &[self], move || {
            Box::new(move |g| {
                let mut gx = vec![0.0; n];
                gx[i] = g.data()[0];
                vec![Some(Tensor::from_vec(gx))]
            })
        }))
    }

    /// Build a `[B, total]` scale matrix whose first `n_scaled` columns hold
    /// this scalar and whose remaining columns are 1.
    pub fn broadcast_skip_scale(
        &self,
        batch: usize,
        n_scaled: usize,
        total: usize,
    ) -> Result<Var<'t>> {
        let r = self.value.item()?;
        let mut out = vec![1.0; batch * total];
        for row in out.chunks_mut(total) {
            row[..n_scaled].fill(r);
        }
        let shape = self.value.shape().to_vec();
        Ok(self
            .tape
            .record(Tensor::new(&[batch, total], out)?, &[self], move || {
                Box::new(move |g| {
                    let s: f64 = g
                        .data()
                        .chunks(total)
                        .map(|row| row[..n_scaled].iter().sum::<f64>())
                        .sum();
                    vec![Some(Tensor::full(&shape, s))]
                })
            }))
    }

    /// Rows of a `[N, E]` table selected by `idx`.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t>> {
        self.value.expect_rank(2, "gather_rows")?;
        let (n, e) = (self.value.shape()[0], self.value.shape()[1]);
        if idx.iter().any(|&i| i >= n) {
            return Err(Error::Dimension(format!("gather_rows index out of {n}")));
        }
        let mut out = Vec::with_capacity(idx.len() * e);
        for &i in idx {
            out.extend_from_slice(&self.value.data()[i * e..(i + 1) * e]);
        }
        let idx = idx.to_vec();
        Ok(self
            .tape
            .record(Tensor::new(&[idx.len(), e], out)?, &[self], move || {
                Box::new(move |g| {
                    let mut gt = vec![0.0; n * e];
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..e {
                            gt[i * e + j] += g.data()[r * e + j];
                        }
                    }
                    vec![Some(Tensor::new(&[n, e], gt).expect("shape"))]
                })
            }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn silu_zero_is_zero() {
        let tape = Tape::inference();
        let x = tape.constant(Tensor::from_vec(vec![0.0]));
        assert_eq!(x.silu().value().data(), &[0.0]);
    }

    #[test]
    fn group_norm_constant_group_is_zero() {
        let tape = Tape::inference();
        let x = tape.constant(Tensor::full(&[1, 4, 2, 2], 3.5));
        let g = tape.constant(Tensor::full(&[4], 1.0));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = x.group_norm(&GroupNormSpec::new(2), &g, &b, None).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
        let z = tape.constant(Tensor::zeros(&[1, 4, 2, 2]));
        let y = z.group_norm(&GroupNormSpec::new(2), &g, &b, None).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn group_norm_rejects_indivisible_groups() {
        let tape = Tape::inference();
        let x = tape.constant(Tensor::zeros(&[1, 6, 2, 2]));
        let g = tape.constant(Tensor::full(&[6], 1.0));
        let b = tape.constant(Tensor::zeros(&[6]));
        let err = x
            .group_norm(&GroupNormSpec::new(4), &g, &b, None)
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn rotated_partition_straddles() {
        let p = GroupNormSpec::with_offset(4, 1).partition(8).unwrap();
        assert_eq!(p, vec![vec![0, 7], vec![1, 2], vec![3, 4], vec![5, 6]]);
        let p = GroupNormSpec::new(4).partition(8).unwrap();
        assert_eq!(p[1], vec![2, 3]);
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[3]));
        let b = tape.leaf(Tensor::zeros(&[4]));
        assert!(matches!(a.add(&b), Err(Error::Dimension(_))));
    }

    #[test]
    fn backward_sum_and_square() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let g = tape.backward(&x.sum()).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let g = tape.backward(&x.mul(&x).unwrap().sum()).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_contract_errors() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(
            tape.backward(&x.mul_scalar(2.0)),
            Err(Error::Contract(_))
        ));
        let loss = x.sum();
        tape.backward(&loss).unwrap();
        assert!(matches!(tape.backward(&loss), Err(Error::Contract(_))));
        tape.reset();
        let x = tape.leaf(Tensor::from_vec(vec![1.0]));
        assert!(tape.backward(&x.sum()).is_ok());
    }
}
