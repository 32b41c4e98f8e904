//! Miniature encoder-decoder UNet with instrumented long skip connections.
//!
//! Encoder: `depth` resolutions of `blocks_per_resolution` residual blocks,
//! each pushing its output as a skip activation; resolutions are joined by
//! 2x average pooling. Decoder: the mirror image, where every block first
//! concatenates `[skip, up]` along channels. Between decoder resolutions the
//! feature map is upsampled (nearest) and a 3x3 convolution maps it to the
//! next resolution's width, so each skip tap sees `d_i` and `u_i` with equal
//! channel counts. Skip layer `i = 0` is the first decoder concat (lowest
//! resolution).
//!
//! Residual block:
//!
//! ```text
//! h   = conv0(silu(norm0(x)))  + proj(emb)
//! h   = conv1(silu(norm1(h)))
//! out = (h + skip1x1(x)) / sqrt(2)
//! ```
//!
//! In decoder blocks `x` is the concatenation. Skip-Tuning enters through two
//! channel masks on that block: the input of `norm0` and the residual input
//! `x` of `skip1x1`. Scaling at concat sets both; the other modes set one.

mod params;

pub use params::{Checkpoint, ParamStore, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use std::f64::consts::FRAC_1_SQRT_2;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffusion::Precond;
use crate::error::{Error, Result};
use crate::skip_tuning::{ScalingMode, SkipProfile};
use crate::tensor::{GroupNormSpec, Tape, Tensor, Var};

pub const UNET_CHECKPOINT_KIND: &str = "mini_unet";

/// Whether GroupNorm groups at decoder concat points respect the boundary
/// between skip and up channels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupAlignment {
    Aligned,
    /// The partition is rotated by half a group, so one group straddles the
    /// skip/up boundary.
    #[default]
    Straddling,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub input_channels: usize,
    pub image_size: usize,
    pub base_channels: usize,
    pub channel_mult: Vec<usize>,
    pub depth: usize,
    pub blocks_per_resolution: usize,
    pub groupnorm_groups: usize,
    pub skip_layer_count: usize,
    pub time_embedding_dim: usize,
    pub group_alignment: GroupAlignment,
    /// 0 disables class conditioning.
    pub num_classes: usize,
    pub sigma_data: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            input_channels: 1,
            image_size: 8,
            base_channels: 32,
            channel_mult: vec![1, 2, 2],
            depth: 3,
            blocks_per_resolution: 2,
            groupnorm_groups: 8,
            skip_layer_count: 6,
            time_embedding_dim: 32,
            group_alignment: GroupAlignment::Straddling,
            num_classes: 0,
            sigma_data: 0.5,
        }
    }
}

impl UNetConfig {
    /// A narrower variant used by tests and the bundled experiments.
    pub fn toy() -> Self {
        UNetConfig {
            base_channels: 8,
            groupnorm_groups: 4,
            time_embedding_dim: 16,
            ..Self::default()
        }
    }

    pub fn with_alignment(mut self, a: GroupAlignment) -> Self {
        self.group_alignment = a;
        self
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mult[level]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depth == 0 || self.blocks_per_resolution == 0 {
            return bad("depth and blocks_per_resolution must be positive".into());
        }
        if self.channel_mult.len() != self.depth {
            return bad(format!(
                "channel_mult has {} entries for depth {}",
                self.channel_mult.len(),
                self.depth
            ));
        }
        if self.skip_layer_count != self.depth * self.blocks_per_resolution {
            return bad(format!(
                "skip_layer_count {} != depth x blocks_per_resolution = {}",
                self.skip_layer_count,
                self.depth * self.blocks_per_resolution
            ));
        }
        let down = 1usize << (self.depth - 1);
        if self.image_size == 0 || !self.image_size.is_multiple_of(down) {
            return bad(format!(
                "image_size {} not divisible by {down}",
                self.image_size
            ));
        }
        if self.input_channels == 0
            || self.time_embedding_dim < 2
            || !self.time_embedding_dim.is_multiple_of(2)
        {
            return bad("input_channels must be positive and time_embedding_dim even".into());
        }
        if !(self.sigma_data > 0.0) {
            return bad("sigma_data must be positive".into());
        }
        let g = self.groupnorm_groups;
        for l in 0..self.depth {
            let c = self.channels(l);
            if c == 0 || g == 0 || !c.is_multiple_of(g) {
                return bad(format!(
                    "{g} groups do not divide {c} channels at level {l}"
                ));
            }
            let size = 2 * c / g;
            match self.group_alignment {
                GroupAlignment::Aligned if !c.is_multiple_of(size) => {
                    return bad(format!(
                        "groups of {size} cannot align with {c} skip channels"
                    ));
                }
                GroupAlignment::Straddling if size < 2 => {
                    return bad("straddling groups need at least 2 channels per group".into());
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn concat_spec(&self, level: usize) -> GroupNormSpec {
        let size = 2 * self.channels(level) / self.groupnorm_groups;
        let offset = match self.group_alignment {
            GroupAlignment::Aligned => 0,
            GroupAlignment::Straddling => size / 2,
        };
        GroupNormSpec::with_offset(self.groupnorm_groups, offset)
    }
}

/// Norms observed at one decoder concat point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SkipTap {
    pub layer: usize,
    /// `||rho * d||`, measured on the scaled skip activation.
    pub d_norm: f64,
    /// `||d||` before scaling.
    pub d_raw_norm: f64,
    pub u_norm: f64,
}

impl SkipTap {
    pub fn prop(&self) -> f64 {
        self.d_norm / self.u_norm
    }
}

/// Source of skip coefficients for one forward pass.
#[derive(Clone, Copy)]
pub enum SkipControl<'a, 't> {
    Off,
    Profile(&'a SkipProfile),
    /// Coefficients held on the tape (shape `[k]`), constant in sigma.
    Trainable {
        rho: &'a Var<'t>,
        mode: ScalingMode,
    },
}

/// Anything that maps a noisy batch to a denoised estimate.
pub trait Denoiser: Sync {
    fn denoise(&self, x: &Tensor, sigma: f64, profile: Option<&SkipProfile>) -> Result<Tensor>;

    /// One noise level per batch item.
    fn denoise_each(
        &self,
        x: &Tensor,
        sigma: &[f64],
        profile: Option<&SkipProfile>,
    ) -> Result<Tensor> {
        if sigma.len() != x.batch() {
            return Err(Error::Dimension(format!(
                "{} sigmas for batch {}",
                sigma.len(),
                x.batch()
            )));
        }
        let parts = sigma
            .iter()
            .enumerate()
            .map(|(b, &s)| self.denoise(&x.slice_batch(b, b + 1), s, profile))
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack(&parts)
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    g: usize,
    b: usize,
}

#[derive(Clone, Debug)]
struct Block {
    norm0: Norm,
    spec0: GroupNormSpec,
    conv0: Conv,
    emb: Conv,
    norm1: Norm,
    conv1: Conv,
    skip: Option<Conv>,
}

#[derive(Clone, Debug)]
struct Layout {
    conv_in: Conv,
    time0: Conv,
    time1: Conv,
    class_emb: Option<usize>,
    enc: Vec<Block>,
    mid: Block,
    dec: Vec<Block>,
    /// Indexed by the level being left; entry 0 unused.
    up: Vec<Option<Conv>>,
    out_norm: Norm,
    conv_out: Conv,
}

enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

#[derive(Default)]
struct Builder {
    specs: Vec<(String, Vec<usize>, Init)>,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push((name, shape, init));
        self.specs.len() - 1
    }

    fn conv(&mut self, name: &str, co: usize, ci: usize, k: usize) -> Conv {
        let std = (1.0 / (ci * k * k) as f64).sqrt();
        Conv {
            w: self.push(format!("{name}.w"), vec![co, ci, k, k], Init::Normal(std)),
            b: self.push(format!("{name}.b"), vec![co], Init::Zeros),
        }
    }

    fn linear(&mut self, name: &str, out: usize, inp: usize) -> Conv {
        let std = (1.0 / inp as f64).sqrt();
        Conv {
            w: self.push(format!("{name}.w"), vec![out, inp], Init::Normal(std)),
            b: self.push(format!("{name}.b"), vec![out], Init::Zeros),
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        Norm {
            g: self.push(format!("{name}.gamma"), vec![c], Init::Ones),
            b: self.push(format!("{name}.beta"), vec![c], Init::Zeros),
        }
    }

    fn block(
        &mut self,
        name: &str,
        ci: usize,
        co: usize,
        emb: usize,
        spec0: GroupNormSpec,
    ) -> Block {
        Block {
            norm0: self.norm(&format!("{name}.norm0"), ci),
            spec0,
            conv0: self.conv(&format!("{name}.conv0"), co, ci, 3),
            emb: self.linear(&format!("{name}.emb"), co, emb),
            norm1: self.norm(&format!("{name}.norm1"), co),
            conv1: self.conv(&format!("{name}.conv1"), co, co, 3),
            skip: (ci != co).then(|| self.conv(&format!("{name}.skip"), co, ci, 1)),
        }
    }
}

fn build_layout(cfg: &UNetConfig) -> (Layout, Builder) {
    let mut b = Builder::default();
    let e = cfg.time_embedding_dim;
    let g = cfg.groupnorm_groups;
    let plain = GroupNormSpec::new(g);
    let conv_in = b.conv("conv_in", cfg.channels(0), cfg.input_channels, 3);
    let time0 = b.linear("time0", e, e);
    let time1 = b.linear("time1", e, e);
    let class_emb = (cfg.num_classes > 0).then(|| {
        b.push(
            "class_emb".into(),
            vec![cfg.num_classes, e],
            Init::Normal(1.0),
        )
    });

    let mut enc = Vec::new();
    let mut c_prev = cfg.channels(0);
    for l in 0..cfg.depth {
        for j in 0..cfg.blocks_per_resolution {
            let c = cfg.channels(l);
            enc.push(b.block(&format!("enc.{l}.{j}"), c_prev, c, e, plain));
            c_prev = c;
        }
    }
    let mid = b.block("mid", c_prev, c_prev, e, plain);
    let mut dec = Vec::new();
    let mut up = vec![None; cfg.depth];
    for l in (0..cfg.depth).rev() {
        let c = cfg.channels(l);
        for j in 0..cfg.blocks_per_resolution {
            dec.push(b.block(&format!("dec.{l}.{j}"), 2 * c, c, e, cfg.concat_spec(l)));
        }
        if l > 0 {
            up[l] = Some(b.conv(&format!("up.{l}"), cfg.channels(l - 1), c, 3));
        }
    }
    let out_norm = b.norm("out_norm", cfg.channels(0));
    let conv_out = b.conv("conv_out", cfg.input_channels, cfg.channels(0), 3);
    let layout = Layout {
        conv_in,
        time0,
        time1,
        class_emb,
        enc,
        mid,
        dec,
        up,
        out_norm,
        conv_out,
    };
    (layout, b)
}

fn sinusoidal(c_noise: &[f64], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(c_noise.len() * dim);
    for &c in c_noise {
        for j in 0..half {
            let f = if half > 1 {
                0.5 * 32f64.powf(j as f64 / (half - 1) as f64)
            } else {
                1.0
            };
            data.push((c * f).cos());
        }
        for j in 0..half {
            let f = if half > 1 {
                0.5 * 32f64.powf(j as f64 / (half - 1) as f64)
            } else {
                1.0
            };
            data.push((c * f).sin());
        }
    }
    Tensor::new(&[c_noise.len(), dim], data).expect("embedding shape")
}

#[derive(Clone, Debug)]
pub struct MiniUNet {
    config: UNetConfig,
    params: ParamStore,
    layout: Layout,
}

impl MiniUNet {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, builder) = build_layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape, init) in builder.specs {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Normal(std) => {
                    let d = Normal::new(0.0, std).expect("positive std");
                    (0..n).map(|_| d.sample(&mut rng)).collect()
                }
            };
            params.push(name, Tensor::new(&shape, data)?);
        }
        Ok(MiniUNet {
            config,
            params,
            layout,
        })
    }

    pub fn from_parts(config: UNetConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::new(config.clone(), 0)?;
        if !reference.params.same_layout(&params) {
            return Err(Error::Format(
                "parameter names or shapes do not match the config".into(),
            ));
        }
        Ok(MiniUNet {
            config,
            params,
            layout: reference.layout,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn k(&self) -> usize {
        self.config.skip_layer_count
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            kind: UNET_CHECKPOINT_KIND.into(),
            config: toml::to_string(&self.config)?,
            params: self.params.clone(),
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.kind != UNET_CHECKPOINT_KIND {
            return Err(Error::Format(format!(
                "expected a {UNET_CHECKPOINT_KIND} checkpoint, got {}",
                ck.kind
            )));
        }
        let config: UNetConfig = toml::from_str(&ck.config)?;
        Self::from_parts(config, ck.params)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    fn block<'t>(
        &self,
        pv: &[Var<'t>],
        blk: &Block,
        x: &Var<'t>,
        emb: &Var<'t>,
        norm_scale: Option<&Var<'t>>,
        orig_scale: Option<&Var<'t>>,
    ) -> Result<Var<'t>> {
        let plain = GroupNormSpec::new(self.config.groupnorm_groups);
        let h = x
            .group_norm(&blk.spec0, &pv[blk.norm0.g], &pv[blk.norm0.b], norm_scale)?
            .silu()
            .conv2d(&pv[blk.conv0.w], Some(&pv[blk.conv0.b]), 1)?;
        let e = emb.linear(&pv[blk.emb.w], Some(&pv[blk.emb.b]))?;
        let h = h
            .add_channelwise(&e)?
            .group_norm(&plain, &pv[blk.norm1.g], &pv[blk.norm1.b], None)?
            .silu()
            .conv2d(&pv[blk.conv1.w], Some(&pv[blk.conv1.b]), 1)?;
        let orig = match orig_scale {
            Some(s) => x.scale_channels(s)?,
            None => x.clone(),
        };
        let skip = match blk.skip {
            Some(c) => orig.conv2d(&pv[c.w], Some(&pv[c.b]), 0)?,
            None => orig,
        };
        Ok(h.add(&skip)?.mul_scalar(FRAC_1_SQRT_2))
    }

    /// Denoised estimate `D(x; sigma)` on a tape.
    ///
    /// `pv` must come from [`ParamStore::vars`] on the same tape. `sigma`
    /// holds one noise level per batch item.
    pub fn forward_var<'t>(
        &self,
        pv: &[Var<'t>],
        x: &Var<'t>,
        sigma: &[f64],
        labels: Option<&[usize]>,
        control: SkipControl<'_, 't>,
        instrument: bool,
    ) -> Result<(Var<'t>, Vec<SkipTap>)> {
        let cfg = &self.config;
        let tape = x.tape();
        let s = x.shape();
        let expect = [cfg.input_channels, cfg.image_size, cfg.image_size];
        if s.len() != 4 || s[1..] != expect {
            return Err(Error::Dimension(format!(
                "UNet expects [B, {expect:?}], got {s:?}"
            )));
        }
        let batch = s[0];
        if sigma.len() != batch {
            return Err(Error::Dimension(format!(
                "{} sigmas for batch {batch}",
                sigma.len()
            )));
        }
        if let Some(bad) = sigma.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(Error::Domain(format!(
                "sigma = {bad} must be positive and finite"
            )));
        }
        if pv.len() != self.params.len() {
            return Err(Error::Contract(
                "parameter vars do not belong to this network".into(),
            ));
        }
        match control {
            SkipControl::Profile(p) => p.validate_for(self.k())?,
            SkipControl::Trainable { rho, .. } if rho.shape() != [self.k()] => {
                return Err(Error::Config(format!(
                    "trainable rho must have shape [{}]",
                    self.k()
                )));
            }
            _ => {}
        }
        let pre: Vec<Precond> = sigma
            .iter()
            .map(|&sg| Precond::new(sg, cfg.sigma_data))
            .collect();
        let lay = &self.layout;

        let c_noise: Vec<f64> = pre.iter().map(|p| p.c_noise).collect();
        let temb = tape.constant(sinusoidal(&c_noise, cfg.time_embedding_dim));
        let mut e = temb.linear(&pv[lay.time0.w], Some(&pv[lay.time0.b]))?;
        if let (Some(ci), Some(lb)) = (lay.class_emb, labels) {
            if lb.len() != batch || lb.iter().any(|&l| l >= cfg.num_classes) {
                return Err(Error::Dimension(
                    "class labels do not match the batch".into(),
                ));
            }
            e = e.add(&pv[ci].gather_rows(lb)?)?;
        }
        let emb = e
            .silu()
            .linear(&pv[lay.time1.w], Some(&pv[lay.time1.b]))?
            .silu();

        let c_in: Vec<f64> = pre.iter().map(|p| p.c_in).collect();
        let mut h =
            x.scale_samples(&c_in)?
                .conv2d(&pv[lay.conv_in.w], Some(&pv[lay.conv_in.b]), 1)?;
        let mut skips = Vec::with_capacity(self.k());
        let mut bi = 0;
        for l in 0..cfg.depth {
            for _ in 0..cfg.blocks_per_resolution {
                h = self.block(pv, &lay.enc[bi], &h, &emb, None, None)?;
                skips.push(h.clone());
                bi += 1;
            }
            if l + 1 < cfg.depth {
                h = h.avg_pool2()?;
            }
        }
        h = self.block(pv, &lay.mid, &h, &emb, None, None)?;

        let mut taps = Vec::new();
        let mut layer = 0;
        for l in (0..cfg.depth).rev() {
            let c = cfg.channels(l);
            for _ in 0..cfg.blocks_per_resolution {
                let d = skips.pop().expect("one skip per decoder block");
                let (scale, coeffs) = match control {
                    SkipControl::Off => (None, None),
                    SkipControl::Profile(p) => {
                        let coeffs: Vec<f64> =
                            sigma.iter().map(|&sg| p.evaluate(layer, sg)).collect();
                        let mut m = Vec::with_capacity(batch * 2 * c);
                        for &r in &coeffs {
                            m.extend(std::iter::repeat_n(r, c));
                            m.extend(std::iter::repeat_n(1.0, c));
                        }
                        let t = tape.constant(Tensor::new(&[batch, 2 * c], m)?);
                        (Some((t, p.mode)), Some(coeffs))
                    }
                    SkipControl::Trainable { rho, mode } => {
                        let r = rho.index(layer)?;
                        let coeffs = vec![r.value().item()?; batch];
                        (
                            Some((r.broadcast_skip_scale(batch, c, 2 * c)?, mode)),
                            Some(coeffs),
                        )
                    }
                };
                if instrument {
                    taps.push(measure_tap(layer, d.value(), h.value(), coeffs.as_deref()));
                }
                let cat = d.concat_channels(&h)?;
                let (ns, os) = match &scale {
                    None => (None, None),
                    Some((t, ScalingMode::AtConcat)) => (Some(t), Some(t)),
                    Some((t, ScalingMode::OrigOnly)) => (None, Some(t)),
                    Some((t, ScalingMode::NormInputOnly)) => (Some(t), None),
                };
                h = self.block(pv, &lay.dec[layer], &cat, &emb, ns, os)?;
                layer += 1;
            }
            if let Some(u) = lay.up[l] {
                h = h.upsample2()?.conv2d(&pv[u.w], Some(&pv[u.b]), 1)?;
            }
        }
        let raw = h
            .group_norm(
                &GroupNormSpec::new(cfg.groupnorm_groups),
                &pv[lay.out_norm.g],
                &pv[lay.out_norm.b],
                None,
            )?
            .silu()
            .conv2d(&pv[lay.conv_out.w], Some(&pv[lay.conv_out.b]), 1)?;
        let c_skip: Vec<f64> = pre.iter().map(|p| p.c_skip).collect();
        let c_out: Vec<f64> = pre.iter().map(|p| p.c_out).collect();
        let out = x.scale_samples(&c_skip)?.add(&raw.scale_samples(&c_out)?)?;
        Ok((out, taps))
    }

    /// Inference forward at per-item noise levels.
    pub fn forward(
        &self,
        x: &Tensor,
        sigma: &[f64],
        labels: Option<&[usize]>,
        profile: Option<&SkipProfile>,
        instrument: bool,
    ) -> Result<(Tensor, Vec<SkipTap>)> {
        let tape = Tape::inference();
        let pv = self.params.vars(&tape, false);
        let control = profile.map_or(SkipControl::Off, SkipControl::Profile);
        let (y, taps) = self.forward_var(
            &pv,
            &tape.constant(x.clone()),
            sigma,
            labels,
            control,
            instrument,
        )?;
        Ok((y.to_tensor(), taps))
    }
}

fn measure_tap(layer: usize, d: &Tensor, u: &Tensor, coeffs: Option<&[f64]>) -> SkipTap {
    let d_raw_norm = d.l2_norm();
    let d_norm = match coeffs {
        None => d_raw_norm,
        Some(cs) => {
            let n = d.item_len();
            let mut acc = 0.0;
            for (b, &r) in cs.iter().enumerate() {
                for &v in &d.data()[b * n..(b + 1) * n] {
                    let sv = r * v;
                    acc += sv * sv;
                }
            }
            acc.sqrt()
        }
    };
    SkipTap {
        layer,
        d_norm,
        d_raw_norm,
        u_norm: u.l2_norm(),
    }
}

impl Denoiser for MiniUNet {
    fn denoise(&self, x: &Tensor, sigma: f64, profile: Option<&SkipProfile>) -> Result<Tensor> {
        let sig = vec![sigma; x.batch()];
        Ok(self.forward(x, &sig, None, profile, false)?.0)
    }

    fn denoise_each(
        &self,
        x: &Tensor,
        sigma: &[f64],
        profile: Option<&SkipProfile>,
    ) -> Result<Tensor> {
        Ok(self.forward(x, sigma, None, profile, false)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(seed: u64, b: usize) -> Tensor {
        Tensor::randn(&[b, 1, 8, 8], &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn default_config_is_valid() {
        UNetConfig::default().validate().unwrap();
        UNetConfig::toy().validate().unwrap();
        let mut bad = UNetConfig::toy();
        bad.skip_layer_count = 5;
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let mut bad = UNetConfig::toy();
        bad.groupnorm_groups = 3;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn shapes_and_taps() {
        let net = MiniUNet::new(UNetConfig::toy(), 1).unwrap();
        let x = input(2, 3);
        let (y, taps) = net.forward(&x, &[1.0, 2.0, 3.0], None, None, true).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(taps.len(), 6);
        assert!(taps.iter().all(|t| t.d_norm >= 0.0 && t.u_norm > 0.0));
        let (_, none) = net
            .forward(&x, &[1.0, 2.0, 3.0], None, None, false)
            .unwrap();
        assert!(none.is_empty());
    }

    #[test]
    fn profile_length_and_range_checked() {
        let net = MiniUNet::new(UNetConfig::toy(), 1).unwrap();
        let x = input(2, 1);
        let p = SkipProfile::uniform(0.5, 4).unwrap();
        assert!(matches!(
            net.forward(&x, &[1.0], None, Some(&p), false),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            net.forward(&x, &[0.0], None, None, false),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let net = MiniUNet::new(UNetConfig::toy(), 3).unwrap();
        let ck = net.to_checkpoint().unwrap();
        let back =
            MiniUNet::from_checkpoint(Checkpoint::read(&mut ck.to_bytes().as_slice()).unwrap())
                .unwrap();
        let x = input(4, 2);
        let a = net.denoise(&x, 0.7, None).unwrap();
        let b = back.denoise(&x, 0.7, None).unwrap();
        assert!(a.bit_eq(&b));
    }
}
