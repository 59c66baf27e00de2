//! Composite blocks: convolution units, C2F, SPPF, VSS, C2F-VMamba and EMCA.

use crate::error::{Error, Result};
use crate::scan::{ss2d, Direction, Merge, ScanVars, Ss2dConfig, DELTA_BIAS_INIT};
use crate::tensor::{ConvSpec, Tensor, Var};

use super::params::{ConvParams, Ctx, Init, ParamId};

pub const NORM_EPS: f64 = 1e-5;

/// A differentiable block over NCHW feature maps.
pub trait Block {
    fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>>;
}

/// Largest group count up to `min(32, c / 4)` that divides `c`.
pub fn norm_groups(c: usize) -> usize {
    (1..=(c / 4).clamp(1, 32))
        .rev()
        .find(|g| c.is_multiple_of(*g))
        .unwrap_or(1)
}

/// Group normalization parameters of one convolution unit.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(init: &mut Init, c: usize) -> Self {
        GroupNorm {
            gain: init.ones("gain", &[c]),
            bias: init.zeros("bias", &[c]),
            groups: norm_groups(c),
        }
    }

    pub fn apply<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.group_norm(ctx.param(self.gain), ctx.param(self.bias), self.groups, NORM_EPS)
    }
}

/// Convolution, group norm and SiLU; or a plain biased convolution.
///
/// Statistics are per sample, so the unit behaves identically in training
/// and inference and under any batch split.
#[derive(Debug, Clone)]
pub struct ConvUnit {
    pub conv: ConvParams,
    pub norm: Option<GroupNorm>,
}

impl ConvUnit {
    pub fn new(init: &mut Init, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Result<Self> {
        let spec = ConvSpec::new(c_in, c_out, kernel, stride, kernel / 2).with_bias(false);
        Ok(ConvUnit {
            conv: init.conv(spec)?,
            norm: Some(GroupNorm::new(&mut init.sub("norm"), c_out)),
        })
    }

    /// Plain projection without normalization or activation.
    pub fn linear(init: &mut Init, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(ConvUnit {
            conv: init.conv(ConvSpec::new(c_in, c_out, 1, 1, 0))?,
            norm: None,
        })
    }
}

impl Block for ConvUnit {
    fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let y = self.conv.apply(ctx, x)?;
        match &self.norm {
            Some(n) => Ok(n.apply(ctx, y)?.silu()),
            None => Ok(y),
        }
    }
}

/// Two 3x3 convolutions with an optional identity shortcut.
#[derive(Debug, Clone)]
pub struct Bottleneck {
    pub cv1: ConvUnit,
    pub cv2: ConvUnit,
    pub shortcut: bool,
}

impl Bottleneck {
    pub fn new(init: &mut Init, c_in: usize, c_out: usize, shortcut: bool) -> Result<Self> {
        Ok(Bottleneck {
            cv1: ConvUnit::new(&mut init.sub("cv1"), c_in, c_out, 3, 1)?,
            cv2: ConvUnit::new(&mut init.sub("cv2"), c_out, c_out, 3, 1)?,
            shortcut: shortcut && c_in == c_out,
        })
    }
}

impl Block for Bottleneck {
    fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let y = self.cv2.forward(ctx, self.cv1.forward(ctx, x)?)?;
        if self.shortcut {
            x.add(y)
        } else {
            Ok(y)
        }
    }
}

/// CSP bottleneck with two convolutions.
///
/// `cv1` widens to `2h`, the second half runs through `n` chained bottlenecks,
/// and every intermediate is concatenated (`(n + 2) * h` channels) before `cv2`.
#[derive(Debug, Clone)]
pub struct C2f {
    pub hidden: usize,
    pub cv1: ConvUnit,
    pub cv2: ConvUnit,
    pub bottlenecks: Vec<Bottleneck>,
}

impl C2f {
    pub fn new(init: &mut Init, c_in: usize, c_out: usize, n: usize, shortcut: bool) -> Result<Self> {
        if !c_out.is_multiple_of(2) {
            return Err(Error::Config(format!("C2F output channels {c_out} must be even")));
        }
        let hidden = c_out / 2;
        let cv1 = ConvUnit::new(&mut init.sub("cv1"), c_in, 2 * hidden, 1, 1)?;
        let cv2 = ConvUnit::new(&mut init.sub("cv2"), (n + 2) * hidden, c_out, 1, 1)?;
        let bottlenecks = (0..n)
            .map(|i| Bottleneck::new(&mut init.sub(format!("m.{i}")), hidden, hidden, shortcut))
            .collect::<Result<_>>()?;
        Ok(C2f {
            hidden,
            cv1,
            cv2,
            bottlenecks,
        })
    }

    pub fn concat_width(&self) -> usize {
        (self.bottlenecks.len() + 2) * self.hidden
    }
}

impl Block for C2f {
    fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let y = self.cv1.forward(ctx, x)?;
        let mut parts = y.split_channels(&[self.hidden, self.hidden])?;
        let mut cur = parts[1];
        for b in &self.bottlenecks {
            cur = b.forward(ctx, cur)?;
            parts.push(cur);
        }
        let cat = ctx.tape.concat_channels(&parts)?;
        self.cv2.forward(ctx, cat)
    }
}

/// Spatial pyramid pooling, fast variant: three chained stride-1 max-pools.
#[derive(Debug, Clone)]
pub struct Sppf {
    pub cv1: ConvUnit,
    pub cv2: ConvUnit,
    pub pool: usize,
}

impl Sppf {
    pub fn new(init: &mut Init, c_in: usize, c_out: usize) -> Result<Self> {
        let hidden = c_in / 2;
        Ok(Sppf {
            cv1: ConvUnit::new(&mut init.sub("cv1"), c_in, hidden, 1, 1)?,
            cv2: ConvUnit::new(&mut init.sub("cv2"), 4 * hidden, c_out, 1, 1)?,
            pool: 5,
        })
    }
}

impl Block for Sppf {
    fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let y0 = self.cv1.forward(ctx, x)?;
        let pad = self.pool / 2;
        let y1 = y0.maxpool2d(self.pool, 1, pad)?;
        let y2 = y1.maxpool2d(self.pool, 1, pad)?;
        let y3 = y2.maxpool2d(self.pool, 1, pad)?;
        let cat = ctx.tape.concat_channels(&[y0, y1, y2, y3])?;
        self.cv2.forward(ctx, cat)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmcaConfig {
    pub channels: usize,
    /// Odd 1-D kernel size, at least 3.
    pub k: usize,
}

impl EmcaConfig {
    /// Kernel size derived from the channel count.
    pub fn adaptive(channels: usize) -> Self {
        EmcaConfig {
            channels,
            k: adaptive_kernel(channels),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k.is_multiple_of(2) || self.k < 3 {
            return Err(Error::Config(format!(
                "EMCA kernel size {} must be odd and >= 3",
                self.k
            )));
        }
        Ok(())
    }
}

/// `t = |(log2(C) + 1) / 2|` truncated, bumped to the next odd value, at least 3.
pub fn adaptive_kernel(channels: usize) -> usize {
    let t = (((channels.max(1) as f64).log2() + 1.0) / 2.0).abs() as usize;
    let k = if t % 2 == 1 { t } else { t + 1 };
    k.max(3)
}

/// Channel attention from summed average and max pooling.
///
/// `a = sigmoid(conv1d(GAP(x) + GMP(x), k))`, output `a[c] * x[.., c, .., ..]`.
#[derive(Debug, Clone)]
pub struct Emca {
    pub cfg: EmcaConfig,
    pub kernel: ParamId,
}

impl Emca {
    pub fn new(init: &mut Init, cfg: EmcaConfig) -> Result<Self> {
        cfg.validate()?;
        let kernel = init.kaiming("conv.weight", &[cfg.k], cfg.k);
        Ok(Emca { cfg, kernel })
    }

    /// Attention weights, shape `(n, c, 1, 1)`.
    pub fn attention<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let (_, c, _, _) = x.value().nchw("emca")?;
        if c != self.cfg.channels {
            return Err(Error::shape(
                "emca",
                format!("input channels {c} != {}", self.cfg.channels),
            ));
        }
        let descriptor = x.global_avg_pool()?.add(x.global_max_pool()?)?;
        Ok(descriptor.conv1d_channels(ctx.param(self.kernel))?.sigmoid())
    }
}

impl Block for Emca {
    fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let a = self.attention(ctx, x)?;
        x.mul_channel(a)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VssConfig {
    pub channels: usize,
    /// Inner width of both paths as a multiple of `channels`.
    pub expansion: f64,
    pub dw_kernel: usize,
    pub scan: Ss2dConfig,
}

impl VssConfig {
    pub fn new(channels: usize, d_state: usize) -> Self {
        VssConfig {
            channels,
            expansion: 1.0,
            dw_kernel: 3,
            scan: Ss2dConfig {
                d_state,
                directions: Direction::ALL.to_vec(),
                merge: Merge::Sum,
            },
        }
    }

    pub fn inner(&self) -> usize {
        ((self.channels as f64 * self.expansion).round() as usize).max(1)
    }
}

#[derive(Debug, Clone)]
struct ScanIds {
    w_delta: ParamId,
    b_delta: ParamId,
    w_b: ParamId,
    w_c: ParamId,
    a_log: ParamId,
    d_skip: ParamId,
}

/// Visual state-space block.
///
/// Pre-norm, then a scan path (expand, depthwise conv, SiLU, SS2D, norm)
/// gated by a SiLU path, projected back and added to the input.
#[derive(Debug, Clone)]
pub struct Vss {
    pub cfg: VssConfig,
    norm_gain: ParamId,
    norm_bias: ParamId,
    in_proj: ConvParams,
    dw: ConvParams,
    scan: ScanIds,
    out_norm_gain: ParamId,
    out_norm_bias: ParamId,
    out_proj: ConvParams,
}

impl Vss {
    pub fn new(init: &mut Init, cfg: VssConfig) -> Result<Self> {
        let c = cfg.channels;
        let e = cfg.inner();
        let ds = cfg.scan.d_state;
        if ds == 0 {
            return Err(Error::Config("VSS d_state must be >= 1".into()));
        }
        let norm_gain = init.ones("norm.weight", &[c]);
        let norm_bias = init.zeros("norm.bias", &[c]);
        let in_proj = init.sub("in_proj").conv(ConvSpec::new(c, 2 * e, 1, 1, 0))?;
        let dw = init.sub("dwconv").conv(ConvSpec::depthwise(e, cfg.dw_kernel))?;
        let scan = {
            let mut s = init.sub("ss2d");
            let bound = (1.0 / e as f64).sqrt();
            ScanIds {
                w_delta: s.uniform("delta_proj.weight", &[e, e, 1, 1], bound),
                b_delta: s.tensor("delta_proj.bias", Tensor::full(&[e], DELTA_BIAS_INIT), false),
                w_b: s.uniform("b_proj.weight", &[ds, e, 1, 1], bound),
                w_c: s.uniform("c_proj.weight", &[ds, e, 1, 1], bound),
                a_log: s.tensor("a_log", crate::scan::a_log_init(e, ds), false),
                d_skip: s.ones("d", &[e]),
            }
        };
        let out_norm_gain = init.ones("out_norm.weight", &[e]);
        let out_norm_bias = init.zeros("out_norm.bias", &[e]);
        let out_proj = init.sub("out_proj").conv(ConvSpec::new(e, c, 1, 1, 0))?;
        Ok(Vss {
            cfg,
            norm_gain,
            norm_bias,
            in_proj,
            dw,
            scan,
            out_norm_gain,
            out_norm_bias,
            out_proj,
        })
    }

    pub fn scan_vars<'t>(&self, ctx: &Ctx<'t>) -> ScanVars<'t> {
        ScanVars {
            d_model: self.cfg.inner(),
            d_state: self.cfg.scan.d_state,
            w_delta: ctx.param(self.scan.w_delta),
            b_delta: ctx.param(self.scan.b_delta),
            w_b: ctx.param(self.scan.w_b),
            w_c: ctx.param(self.scan.w_c),
            a_log: ctx.param(self.scan.a_log),
            d_skip: ctx.param(self.scan.d_skip),
        }
    }
}

impl Block for Vss {
    fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let (_, c, _, _) = x.value().nchw("vss")?;
        if c != self.cfg.channels {
            return Err(Error::shape(
                "vss",
                format!("input channels {c} != {}", self.cfg.channels),
            ));
        }
        let e = self.cfg.inner();
        let normed = x.layer_norm_channels(ctx.param(self.norm_gain), ctx.param(self.norm_bias), NORM_EPS)?;
        let expanded = self.in_proj.apply(ctx, normed)?;
        let paths = expanded.split_channels(&[e, e])?;
        let scanned = ss2d(
            self.dw.apply(ctx, paths[0])?.silu(),
            &self.scan_vars(ctx),
            &self.cfg.scan,
        )?;
        let scanned =
            scanned.layer_norm_channels(ctx.param(self.out_norm_gain), ctx.param(self.out_norm_bias), NORM_EPS)?;
        let gated = scanned.mul(paths[1].silu())?;
        x.add(self.out_proj.apply(ctx, gated)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct C2fVMambaConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Number of VSS stages, at least 1.
    pub n: usize,
    /// Concatenate `Conv(X)` itself alongside its halves (`(n + 3) * h`
    /// channels); otherwise use the C2F layout (`(n + 2) * h`).
    pub strict_concat: bool,
    pub d_state: usize,
}

impl C2fVMambaConfig {
    pub fn new(in_channels: usize, out_channels: usize, n: usize) -> Self {
        C2fVMambaConfig {
            in_channels,
            out_channels,
            n,
            strict_concat: true,
            d_state: 16,
        }
    }

    pub fn hidden(&self) -> usize {
        self.out_channels / 2
    }

    pub fn concat_width(&self) -> usize {
        let extra = if self.strict_concat { 3 } else { 2 };
        (self.n + extra) * self.hidden()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.out_channels.is_multiple_of(2) || self.out_channels == 0 {
            return Err(Error::Config(format!(
                "C2F-VMamba output channels {} must be even and positive",
                self.out_channels
            )));
        }
        if self.n == 0 {
            return Err(Error::Config("C2F-VMamba needs n >= 1 VSS stages".into()));
        }
        Ok(())
    }
}

/// C2F with its bottlenecks replaced by a chain of VSS blocks.
///
/// `X1, X2 = split(conv(X))`, `Y2 = VSS(X2)`, then `n - 1` further VSS
/// stages; the output is `conv(concat(X1, conv(X), Y2, chain...))`.
#[derive(Debug, Clone)]
pub struct C2fVMamba {
    pub cfg: C2fVMambaConfig,
    pub cv1: ConvUnit,
    pub cv2: ConvUnit,
    pub stages: Vec<Vss>,
}

impl C2fVMamba {
    pub fn new(init: &mut Init, cfg: C2fVMambaConfig) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden();
        let cv1 = ConvUnit::new(&mut init.sub("cv1"), cfg.in_channels, 2 * h, 1, 1)?;
        let cv2 = ConvUnit::new(&mut init.sub("cv2"), cfg.concat_width(), cfg.out_channels, 1, 1)?;
        let stages = (0..cfg.n)
            .map(|i| Vss::new(&mut init.sub(format!("m.{i}")), VssConfig::new(h, cfg.d_state)))
            .collect::<Result<_>>()?;
        Ok(C2fVMamba { cfg, cv1, cv2, stages })
    }

    /// The concatenated tensor fed to the final convolution.
    pub fn concat<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let (_, c, _, _) = x.value().nchw("c2f_vmamba")?;
        if c != self.cfg.in_channels {
            return Err(Error::shape(
                "c2f_vmamba",
                format!("input channels {c} != {}", self.cfg.in_channels),
            ));
        }
        let h = self.cfg.hidden();
        let conv_x = self.cv1.forward(ctx, x)?;
        let halves = conv_x.split_channels(&[h, h])?;
        let mut parts = if self.cfg.strict_concat {
            vec![halves[0], conv_x]
        } else {
            vec![halves[0], halves[1]]
        };
        let mut cur = halves[1];
        for stage in &self.stages {
            cur = stage.forward(ctx, cur)?;
            parts.push(cur);
        }
        ctx.tape.concat_channels(&parts)
    }
}

impl Block for C2fVMamba {
    fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let cat = self.concat(ctx, x)?;
        self.cv2.forward(ctx, cat)
    }
}
