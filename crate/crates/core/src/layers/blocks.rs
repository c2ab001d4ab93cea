use std::fmt;
use std::str::FromStr;

use rand::Rng;
use spikelab_numcore::ops::conv_out_len;
use spikelab_numcore::{Conv2dSpec, Pool2dSpec, Tensor, Var};

use super::store::{check_domain, Domain, Forward, LayerKind, ParamId, ParamRole, ParamStore, Part, Stream};
use crate::error::{param_err, Error, Result};
use crate::neuron::SpikeFn;

/// BN scale and shift plus running statistics for `channels` channels.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), ParamRole::BnScale, Tensor::ones(&[channels])),
            beta: store.add(format!("{name}.beta"), ParamRole::BnShift, Tensor::zeros(&[channels])),
            mean: store.add(format!("{name}.running_mean"), ParamRole::RunningMean, Tensor::zeros(&[channels])),
            var: store.add(format!("{name}.running_var"), ParamRole::RunningVar, Tensor::ones(&[channels])),
            channels,
        }
    }

    pub fn forward(&self, ctx: &mut Forward, x: Var) -> Result<Var> {
        ctx.batch_norm(x, self.gamma, self.beta, self.mean, self.var)
    }
}

/// Bias-free convolution followed by batch normalisation, with `k/2` padding.
#[derive(Debug, Clone)]
pub struct ConvBn {
    pub name: String,
    pub weight: ParamId,
    pub bn: BatchNorm,
    pub spec: Conv2dSpec,
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 || groups == 0 {
            return param_err(format!("{name}: kernel, stride and groups must be positive"));
        }
        if in_channels % groups != 0 || out_channels % groups != 0 {
            return param_err(format!("{name}: groups {groups} must divide {in_channels} and {out_channels}"));
        }
        let cin_g = in_channels / groups;
        let weight = store.add_normal(
            format!("{name}.weight"),
            &[out_channels, cin_g, kernel, kernel],
            cin_g * kernel * kernel,
            2.0,
            rng,
        );
        Ok(ConvBn {
            name: name.to_string(),
            weight,
            bn: BatchNorm::new(store, &format!("{name}.bn"), out_channels),
            spec: Conv2dSpec {
                stride,
                padding: kernel / 2,
                groups,
            },
            kernel,
            in_channels,
            out_channels,
        })
    }

    pub fn kind(&self) -> LayerKind {
        if self.spec.groups > 1 && self.spec.groups == self.in_channels {
            LayerKind::DepthwiseConv
        } else {
            LayerKind::Conv
        }
    }

    /// FLOPs of one `h × w` frame: `2·k²·(C_in/groups)·C_out·H'·W'`.
    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let oh = conv_out_len(h, self.kernel, self.spec.stride, self.spec.padding);
        let ow = conv_out_len(w, self.kernel, self.spec.stride, self.spec.padding);
        let cin_g = self.in_channels / self.spec.groups;
        2 * (self.kernel * self.kernel * cin_g * self.out_channels * oh * ow) as u64
    }

    pub fn forward(&self, ctx: &mut Forward, x: Var, encoding: bool) -> Result<Var> {
        let shape = ctx.value(x).shape().to_vec();
        if shape.len() != 4 {
            return param_err(format!("{}: expected [N, C, H, W], got {shape:?}", self.name));
        }
        let flops = self.flops(shape[2], shape[3]);
        ctx.record(&self.name, self.kind(), flops, x, encoding);
        let w = ctx.param(self.weight);
        let y = ctx.graph_mut().conv2d(x, w, self.spec)?;
        self.bn.forward(ctx, y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbedKind {
    /// LIF → conv 3×3 stride 2 → BN.
    Orig,
    /// LIF → conv 3×3 stride 1 → BN → max-pool 3×3 stride 2.
    Max,
}

pub const EMBED_POOL: Pool2dSpec = Pool2dSpec {
    kernel: 3,
    stride: 2,
    padding: 1,
};

/// One downsampling embed step; halves the spatial extent.
#[derive(Debug, Clone)]
pub struct EmbedBlock {
    pub kind: EmbedKind,
    pub conv: ConvBn,
}

impl EmbedBlock {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, kind: EmbedKind, cin: usize, cout: usize) -> Result<Self> {
        let stride = match kind {
            EmbedKind::Orig => 2,
            EmbedKind::Max => 1,
        };
        Ok(EmbedBlock {
            kind,
            conv: ConvBn::new(store, rng, &format!("{name}.conv"), cin, cout, 3, stride, 1)?,
        })
    }

    /// Fires the input (treated as current), then conv, BN and optional pooling.
    /// Returns a membrane-domain stream.
    pub fn forward(&self, ctx: &mut Forward, x: Stream, encoding: bool) -> Result<Stream> {
        let s = ctx.fire_stream(x, &format!("{}.in", self.conv.name))?;
        let mut y = self.conv.forward(ctx, s.var, encoding)?;
        if self.kind == EmbedKind::Max {
            y = ctx.graph_mut().max_pool2d(y, EMBED_POOL)?;
        }
        Ok(Stream {
            var: y,
            domain: Domain::Membrane,
        })
    }
}

/// Pairing of the two embed branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PatchEmbedKind {
    /// (Embed, Embed)
    Orig,
    /// (Max-Embed, Embed)
    Max,
    /// (Max-Embed, Max-Embed)
    MaxPlus,
}

impl PatchEmbedKind {
    pub fn branches(self) -> (EmbedKind, EmbedKind) {
        match self {
            PatchEmbedKind::Orig => (EmbedKind::Orig, EmbedKind::Orig),
            PatchEmbedKind::Max => (EmbedKind::Max, EmbedKind::Orig),
            PatchEmbedKind::MaxPlus => (EmbedKind::Max, EmbedKind::Max),
        }
    }
}

impl fmt::Display for PatchEmbedKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PatchEmbedKind::Orig => "orig",
            PatchEmbedKind::Max => "max",
            PatchEmbedKind::MaxPlus => "max+",
        })
    }
}

impl FromStr for PatchEmbedKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().trim_start_matches("embed-") {
            "orig" => Ok(PatchEmbedKind::Orig),
            "max" => Ok(PatchEmbedKind::Max),
            "max+" | "maxplus" => Ok(PatchEmbedKind::MaxPlus),
            _ => Err(Error::Parse(format!("unknown patch embed {s:?} (orig, max, max+)"))),
        }
    }
}

/// Two chains of embed blocks whose outputs are summed in the membrane domain.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub kind: PatchEmbedKind,
    pub g1: Vec<EmbedBlock>,
    pub g2: Vec<EmbedBlock>,
}

impl PatchEmbed {
    /// `depth` embed blocks per branch: downsampling by `2^depth`.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        kind: PatchEmbedKind,
        cin: usize,
        cout: usize,
        depth: usize,
    ) -> Result<Self> {
        if depth == 0 {
            return param_err(format!("{name}: patch embed needs at least one block per branch"));
        }
        let (k1, k2) = kind.branches();
        let mut chain = |branch: &str, k: EmbedKind| -> Result<Vec<EmbedBlock>> {
            (0..depth)
                .map(|i| {
                    let c = if i == 0 { cin } else { cout };
                    EmbedBlock::new(store, rng, &format!("{name}.{branch}.{i}"), k, c, cout)
                })
                .collect()
        };
        let g1 = chain("g1", k1)?;
        let g2 = chain("g2", k2)?;
        Ok(PatchEmbed { kind, g1, g2 })
    }

    /// `encoding` marks the first block of each branch as consuming the encoder output.
    pub fn forward(&self, ctx: &mut Forward, x: Stream, encoding: bool) -> Result<Stream> {
        let run = |ctx: &mut Forward, chain: &[EmbedBlock]| -> Result<Stream> {
            let mut s = x;
            for (i, b) in chain.iter().enumerate() {
                s = b.forward(ctx, s, encoding && i == 0)?;
            }
            Ok(s)
        };
        let a = run(ctx, &self.g1)?;
        let b = run(ctx, &self.g2)?;
        let (sa, sb) = (ctx.value(a.var).shape().to_vec(), ctx.value(b.var).shape().to_vec());
        if sa != sb {
            return Err(Error::Param(format!("patch embed branches disagree: {sa:?} vs {sb:?}")));
        }
        Ok(Stream {
            var: ctx.graph_mut().add(a.var, b.var)?,
            domain: Domain::Membrane,
        })
    }
}

/// Token mixer choice for the blocks of one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenMixer {
    Identity,
    /// Depthwise conv with odd kernel size.
    Dwc(usize),
    Ssa,
    MaxPool,
    AvgPool,
}

impl fmt::Display for TokenMixer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokenMixer::Identity => f.write_str("identity"),
            TokenMixer::Dwc(k) => write!(f, "dwc-{k}"),
            TokenMixer::Ssa => f.write_str("ssa"),
            TokenMixer::MaxPool => f.write_str("maxpool"),
            TokenMixer::AvgPool => f.write_str("avgpool"),
        }
    }
}

impl FromStr for TokenMixer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let l = s.to_ascii_lowercase();
        match l.as_str() {
            "identity" => return Ok(TokenMixer::Identity),
            "ssa" => return Ok(TokenMixer::Ssa),
            "maxpool" | "max-pool" => return Ok(TokenMixer::MaxPool),
            "avgpool" | "avg-pool" => return Ok(TokenMixer::AvgPool),
            _ => {}
        }
        if let Some(k) = l.strip_prefix("dwc-") {
            let k: usize = k.parse().map_err(|_| Error::Parse(format!("bad DWC kernel in {s:?}")))?;
            if k % 2 == 0 {
                return Err(Error::Parse(format!("DWC kernel must be odd, got {k}")));
            }
            return Ok(TokenMixer::Dwc(k));
        }
        Err(Error::Parse(format!(
            "unknown token mixer {s:?} (identity, dwc-<k>, ssa, maxpool, avgpool)"
        )))
    }
}

pub const MIXER_POOL: Pool2dSpec = Pool2dSpec {
    kernel: 3,
    stride: 1,
    padding: 1,
};

pub const DEFAULT_SSA_SCALE: f64 = 0.125;

#[derive(Debug, Clone)]
pub enum Mixer {
    Identity,
    Dwc(ConvBn),
    Pool { max: bool, bn: BatchNorm },
    Ssa(Ssa),
}

/// Single-head spiking self-attention: `LIF(Q·(Kᵀ·V)·s)` then a projection.
#[derive(Debug, Clone)]
pub struct Ssa {
    pub name: String,
    pub q: ConvBn,
    pub k: ConvBn,
    pub v: ConvBn,
    pub proj: ConvBn,
    pub scale: f64,
}

impl Mixer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        kind: TokenMixer,
        channels: usize,
        ssa_scale: f64,
    ) -> Result<Self> {
        Ok(match kind {
            TokenMixer::Identity => Mixer::Identity,
            TokenMixer::Dwc(k) => {
                if k % 2 == 0 {
                    return param_err(format!("{name}: DWC kernel must be odd, got {k}"));
                }
                Mixer::Dwc(ConvBn::new(store, rng, &format!("{name}.dwc"), channels, channels, k, 1, channels)?)
            }
            TokenMixer::MaxPool | TokenMixer::AvgPool => Mixer::Pool {
                max: kind == TokenMixer::MaxPool,
                bn: BatchNorm::new(store, &format!("{name}.pool.bn"), channels),
            },
            TokenMixer::Ssa => {
                let mut lin = |p: &str| ConvBn::new(store, rng, &format!("{name}.{p}"), channels, channels, 1, 1, 1);
                Mixer::Ssa(Ssa {
                    name: name.to_string(),
                    q: lin("q")?,
                    k: lin("k")?,
                    v: lin("v")?,
                    proj: lin("proj")?,
                    scale: ssa_scale,
                })
            }
        })
    }

    /// Mixes a spike stream; returns membrane-domain values.
    pub fn forward(&self, ctx: &mut Forward, s: Stream) -> Result<Var> {
        match self {
            Mixer::Identity => Ok(s.var),
            Mixer::Dwc(c) => c.forward(ctx, s.var, false),
            Mixer::Pool { max, bn } => {
                let y = if *max {
                    ctx.graph_mut().max_pool2d(s.var, MIXER_POOL)?
                } else {
                    ctx.graph_mut().avg_pool2d(s.var, MIXER_POOL)?
                };
                bn.forward(ctx, y)
            }
            Mixer::Ssa(a) => a.forward(ctx, s),
        }
    }
}

impl Ssa {
    fn spikes(&self, ctx: &mut Forward, c: &ConvBn, s: Var) -> Result<Var> {
        let m = c.forward(ctx, s, false)?;
        let out = ctx.fire(m)?;
        if ctx.spike_fn() == SpikeFn::Heaviside {
            check_domain(ctx.value(out), Domain::Binary, &c.name)?;
        }
        Ok(out)
    }

    pub fn forward(&self, ctx: &mut Forward, s: Stream) -> Result<Var> {
        let shape = ctx.value(s.var).shape().to_vec();
        let (nb, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let n = h * w;
        let q = self.spikes(ctx, &self.q, s.var)?;
        let k = self.spikes(ctx, &self.k, s.var)?;
        let v = self.spikes(ctx, &self.v, s.var)?;
        let g = ctx.graph_mut();
        let q = g.reshape(q, &[nb, c, n])?;
        let q = g.transpose(q)?;
        let kt = g.reshape(k, &[nb, c, n])?;
        let v = g.reshape(v, &[nb, c, n])?;
        let v = g.transpose(v)?;
        let name = &self.name;
        let mm_flops = 2 * (n * c * c) as u64;
        ctx.record(&format!("{name}.kv"), LayerKind::SpikeMatmul, mm_flops, kt, false);
        let kv = ctx.graph_mut().matmul(kt, v)?;
        ctx.record(&format!("{name}.qkv"), LayerKind::SpikeMatmul, mm_flops, q, false);
        let g = ctx.graph_mut();
        let qkv = g.matmul(q, kv)?;
        let scaled = g.scale(qkv, self.scale);
        let back = g.transpose(scaled)?;
        let current = g.reshape(back, &[nb, c, h, w])?;
        let attn = ctx.fire(current)?;
        self.proj.forward(ctx, attn, false)
    }
}

/// Two 1×1 convolutions with BN and a spiking hidden layer.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: ConvBn,
    pub fc2: ConvBn,
}

impl Mlp {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, channels: usize, ratio: f64) -> Result<Self> {
        let hidden = hidden_width(channels, ratio)?;
        Ok(Mlp {
            fc1: ConvBn::new(store, rng, &format!("{name}.fc1"), channels, hidden, 1, 1, 1)?,
            fc2: ConvBn::new(store, rng, &format!("{name}.fc2"), hidden, channels, 1, 1, 1)?,
        })
    }

    pub fn hidden(&self) -> usize {
        self.fc1.out_channels
    }

    pub fn forward(&self, ctx: &mut Forward, s: Stream) -> Result<Var> {
        let h = self.fc1.forward(ctx, s.var, false)?;
        let hs = ctx.fire(h)?;
        self.fc2.forward(ctx, hs, false)
    }
}

/// `round(channels · ratio)`, at least 1.
pub fn hidden_width(channels: usize, ratio: f64) -> Result<usize> {
    if !(ratio > 0.0) {
        return param_err(format!("MLP ratio must be positive, got {ratio}"));
    }
    Ok(((channels as f64 * ratio).round() as usize).max(1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShortcutKind {
    /// Spikes added into a membrane potential; result is membrane-domain.
    Vanilla,
    /// Spikes added to spikes; result is ternary.
    PreSpike,
    /// Membrane potentials added before the next neuron.
    Membrane,
}

impl fmt::Display for ShortcutKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShortcutKind::Vanilla => "vanilla",
            ShortcutKind::PreSpike => "prespike",
            ShortcutKind::Membrane => "membrane",
        })
    }
}

impl FromStr for ShortcutKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vanilla" => Ok(ShortcutKind::Vanilla),
            "prespike" | "pre-spike" => Ok(ShortcutKind::PreSpike),
            "membrane" => Ok(ShortcutKind::Membrane),
            _ => Err(Error::Parse(format!("unknown shortcut {s:?} (vanilla, prespike, membrane)"))),
        }
    }
}

/// Residual sum with domain rules:
///
/// * Membrane: membrane + membrane → membrane
/// * PreSpike: binary + binary → ternary
/// * Vanilla: membrane + binary → membrane
pub fn shortcut(ctx: &mut Forward, kind: ShortcutKind, main: Stream, skip: Stream) -> Result<Stream> {
    let (want_main, want_skip, out) = match kind {
        ShortcutKind::Membrane => (Domain::Membrane, Domain::Membrane, Domain::Membrane),
        ShortcutKind::PreSpike => (Domain::Binary, Domain::Binary, Domain::Ternary),
        ShortcutKind::Vanilla => (Domain::Membrane, Domain::Binary, Domain::Membrane),
    };
    if main.domain != want_main || skip.domain != want_skip {
        return Err(Error::Domain(format!(
            "{kind} shortcut needs {want_main:?} + {want_skip:?}, got {:?} + {:?}",
            main.domain, skip.domain
        )));
    }
    Ok(Stream {
        var: ctx.graph_mut().add(main.var, skip.var)?,
        domain: out,
    })
}

/// Token-mixing sub-block and MLP sub-block, each with its own shortcut.
#[derive(Debug, Clone)]
pub struct Block {
    pub name: String,
    pub mixer: Mixer,
    pub mlp: Mlp,
    pub mixer_shortcut: ShortcutKind,
    pub mlp_shortcut: ShortcutKind,
}

impl Block {
    fn residual(ctx: &mut Forward, kind: ShortcutKind, branch: Var, x: Stream, s: Stream) -> Result<Stream> {
        let main = Stream {
            var: branch,
            domain: Domain::Membrane,
        };
        match kind {
            ShortcutKind::Membrane => shortcut(ctx, kind, main, x),
            ShortcutKind::Vanilla => shortcut(ctx, kind, main, s),
            ShortcutKind::PreSpike => {
                let fired = Stream {
                    var: ctx.fire(branch)?,
                    domain: Domain::Binary,
                };
                shortcut(ctx, kind, fired, s)
            }
        }
    }

    pub fn forward(&self, ctx: &mut Forward, x: Stream) -> Result<Stream> {
        let (stage, _) = ctx.scope();
        let x1 = if matches!(self.mixer, Mixer::Identity) {
            x
        } else {
            ctx.set_scope(stage, Part::TokenMix);
            let s = ctx.spikes(x, &format!("{}.mixer.in", self.name))?;
            let m = self.mixer.forward(ctx, s)?;
            Self::residual(ctx, self.mixer_shortcut, m, x, s)?
        };
        ctx.set_scope(stage, Part::Mlp);
        let s1 = ctx.spikes(x1, &format!("{}.mlp.in", self.name))?;
        let h = self.mlp.forward(ctx, s1)?;
        Self::residual(ctx, self.mlp_shortcut, h, x1, s1)
    }
}

/// Global average pool of spikes, a linear layer per timestep, and logits
/// averaged over time.
#[derive(Debug, Clone)]
pub struct Head {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub classes: usize,
}

impl Head {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, in_features: usize, classes: usize) -> Self {
        Head {
            weight: store.add_normal(format!("{name}.weight"), &[in_features, classes], in_features, 1.0, rng),
            bias: store.add(format!("{name}.bias"), ParamRole::Bias, Tensor::zeros(&[classes])),
            in_features,
            classes,
        }
    }

    pub fn forward(&self, ctx: &mut Forward, x: Stream) -> Result<Var> {
        let s = ctx.spikes(x, "head.in")?;
        let t = ctx.timesteps();
        let pooled = ctx.graph_mut().mean_spatial(s.var)?;
        let nb = ctx.value(pooled).shape()[0];
        ctx.record("head", LayerKind::Linear, 2 * (self.in_features * self.classes) as u64, pooled, false);
        let (w, b) = (ctx.param(self.weight), ctx.param(self.bias));
        let g = ctx.graph_mut();
        let z = g.matmul(pooled, w)?;
        let z = g.channel_bias(z, b)?;
        let z = g.reshape(z, &[t, nb / t, self.classes])?;
        Ok(g.mean_leading(z)?)
    }
}
