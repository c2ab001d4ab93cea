//! Network assembly, input encoding and event binning.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spikelab_numcore::{Tensor, Var};

use crate::config::{ConfigDoc, Section};
use crate::error::{param_err, Error, Result};
use crate::layers::{
    Block, Domain, Forward, Head, LayerRecord, Mixer, Mlp, ParamStore, Part, PatchEmbed, PatchEmbedKind, Phase,
    ShortcutKind, SpikeTensor, TokenMixer, Transmission, DEFAULT_SSA_SCALE,
};
use crate::neuron::{run_sequence, NeuronParams, SpikeFn, DEFAULT_BETA, DEFAULT_SURROGATE_ALPHA};

#[derive(Debug, Clone, PartialEq)]
pub struct StageSpec {
    pub embed: PatchEmbedKind,
    pub mixer: TokenMixer,
    pub blocks: usize,
    pub channels: usize,
}

/// Declarative network description.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchSpec {
    pub name: String,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub timesteps: usize,
    pub num_classes: usize,
    /// Downsampling of the first patch embed; a power of two.
    pub patch_size: usize,
    pub mlp_ratio: f64,
    pub ssa_scale: f64,
    pub shortcut: ShortcutKind,
    pub beta: f64,
    pub v_th: f64,
    pub surrogate_alpha: f64,
    /// Parameter initialisation seed.
    pub seed: u64,
    pub stages: Vec<StageSpec>,
}

pub const DEFAULT_V_TH: f64 = 0.5;
pub const MAX_STAGES: usize = 3;

fn stage(embed: PatchEmbedKind, mixer: TokenMixer, blocks: usize, channels: usize) -> StageSpec {
    StageSpec {
        embed,
        mixer,
        blocks,
        channels,
    }
}

impl ArchSpec {
    fn base(name: &str, in_channels: usize, side: usize, timesteps: usize, num_classes: usize) -> Self {
        ArchSpec {
            name: name.to_string(),
            in_channels,
            height: side,
            width: side,
            timesteps,
            num_classes,
            patch_size: 4,
            mlp_ratio: 4.0,
            ssa_scale: DEFAULT_SSA_SCALE,
            shortcut: ShortcutKind::Membrane,
            beta: DEFAULT_BETA,
            v_th: DEFAULT_V_TH,
            surrogate_alpha: DEFAULT_SURROGATE_ALPHA,
            seed: 0,
            stages: Vec::new(),
        }
    }

    /// Toy network: 1×16×16 input, channels 16/32/64.
    pub fn tiny() -> Self {
        use PatchEmbedKind::*;
        ArchSpec {
            stages: vec![
                stage(Orig, TokenMixer::Dwc(3), 1, 16),
                stage(Max, TokenMixer::Dwc(3), 1, 32),
                stage(Max, TokenMixer::Ssa, 1, 64),
            ],
            ..Self::base("tiny", 1, 16, 4, 2)
        }
    }

    /// CIFAR-style network: 3×32×32, blocks 1/1/2, mixers Identity/DWC-3/SSA,
    /// final width 384.
    pub fn cifar() -> Self {
        use PatchEmbedKind::*;
        ArchSpec {
            stages: vec![
                stage(Orig, TokenMixer::Identity, 1, 96),
                stage(Max, TokenMixer::Dwc(3), 1, 192),
                stage(Max, TokenMixer::Ssa, 2, 384),
            ],
            ..Self::base("cifar", 3, 32, 4, 10)
        }
    }

    /// Event-camera network: 2×128×128, two stages Max+/Max with DWC-3/SSA.
    pub fn neuromorphic() -> Self {
        use PatchEmbedKind::*;
        ArchSpec {
            stages: vec![
                stage(MaxPlus, TokenMixer::Dwc(3), 1, 128),
                stage(Max, TokenMixer::Ssa, 1, 256),
            ],
            ..Self::base("neuromorphic", 2, 128, 16, 11)
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "cifar" => Ok(Self::cifar()),
            "neuromorphic" => Ok(Self::neuromorphic()),
            _ => param_err(format!("unknown preset {name:?} (tiny, cifar, neuromorphic)")),
        }
    }

    pub fn neuron(&self) -> Result<NeuronParams> {
        NeuronParams::lif(self.beta, self.v_th)?.with_surrogate_alpha(self.surrogate_alpha)
    }

    /// Embed blocks per branch in the first stage.
    pub fn first_embed_depth(&self) -> usize {
        self.patch_size.trailing_zeros() as usize
    }

    /// Spatial extent after each stage.
    pub fn stage_extents(&self) -> Vec<(usize, usize)> {
        let mut f = self.patch_size;
        (0..self.stages.len())
            .map(|i| {
                if i > 0 {
                    f *= 2;
                }
                (self.height / f, self.width / f)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() || self.stages.len() > MAX_STAGES {
            return param_err(format!("need 1 to {MAX_STAGES} stages, got {}", self.stages.len()));
        }
        if self.timesteps == 0 || self.in_channels == 0 || self.num_classes == 0 {
            return param_err("timesteps, in_channels and num_classes must be positive");
        }
        if self.patch_size < 2 || !self.patch_size.is_power_of_two() {
            return param_err(format!("patch size must be a power of two >= 2, got {}", self.patch_size));
        }
        let total = self.patch_size << (self.stages.len() - 1);
        if self.height % total != 0 || self.width % total != 0 {
            return param_err(format!(
                "input {}x{} is not divisible by the total downsampling {total}",
                self.height, self.width
            ));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.blocks == 0 || s.channels == 0 {
                return param_err(format!("stage {}: blocks and channels must be positive", i + 1));
            }
            if let TokenMixer::Dwc(k) = s.mixer {
                if k % 2 == 0 {
                    return param_err(format!("stage {}: DWC kernel must be odd", i + 1));
                }
            }
        }
        if !(self.mlp_ratio > 0.0) || !self.ssa_scale.is_finite() {
            return param_err("mlp_ratio must be positive and ssa_scale finite");
        }
        self.neuron()?;
        Ok(())
    }

    pub fn to_doc(&self) -> ConfigDoc {
        let mut m = Section::new("model");
        m.push("name", &self.name);
        m.push("in_channels", self.in_channels);
        m.push("height", self.height);
        m.push("width", self.width);
        m.push("timesteps", self.timesteps);
        m.push("num_classes", self.num_classes);
        m.push("patch_size", self.patch_size);
        m.push("mlp_ratio", self.mlp_ratio);
        m.push("ssa_scale", self.ssa_scale);
        m.push("shortcut", self.shortcut);
        m.push("beta", self.beta);
        m.push("v_th", self.v_th);
        m.push("surrogate_alpha", self.surrogate_alpha);
        m.push("seed", self.seed);
        let mut sections = vec![m];
        for s in &self.stages {
            let mut st = Section::new("stage");
            st.push("embed", s.embed);
            st.push("mixer", s.mixer);
            st.push("blocks", s.blocks);
            st.push("channels", s.channels);
            sections.push(st);
        }
        ConfigDoc { sections }
    }

    pub fn to_config(&self) -> String {
        self.to_doc().render()
    }

    /// Reads `[model]` and `[stage]` sections; other sections are ignored.
    pub fn from_doc(doc: &ConfigDoc) -> Result<Self> {
        let model = doc.single("model")?.ok_or_else(|| Error::Config {
            line: 0,
            msg: "missing [model] section".into(),
        })?;
        let mut r = model.reader();
        let mut spec = ArchSpec::base(
            &r.get_or("name", "custom".to_string())?,
            r.required("in_channels")?,
            0,
            r.get_or("timesteps", 4)?,
            r.required("num_classes")?,
        );
        spec.height = r.required("height")?;
        spec.width = r.required("width")?;
        spec.patch_size = r.get_or("patch_size", spec.patch_size)?;
        spec.mlp_ratio = r.get_or("mlp_ratio", spec.mlp_ratio)?;
        spec.ssa_scale = r.get_or("ssa_scale", spec.ssa_scale)?;
        spec.shortcut = r.get_or("shortcut", spec.shortcut)?;
        spec.beta = r.get_or("beta", spec.beta)?;
        spec.v_th = r.get_or("v_th", spec.v_th)?;
        spec.surrogate_alpha = r.get_or("surrogate_alpha", spec.surrogate_alpha)?;
        spec.seed = r.get_or("seed", spec.seed)?;
        r.finish()?;
        for s in doc.sections_named("stage") {
            let mut r = s.reader();
            spec.stages.push(StageSpec {
                embed: r.required("embed")?,
                mixer: r.required("mixer")?,
                blocks: r.required("blocks")?,
                channels: r.required("channels")?,
            });
            r.finish()?;
        }
        spec.validate().map_err(|e| Error::Config {
            line: model.line,
            msg: e.to_string(),
        })?;
        Ok(spec)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let doc = ConfigDoc::parse(text)?;
        doc.check_sections(&["model", "stage"])?;
        Self::from_doc(&doc)
    }
}

/// `[T, B, C, H, W]` from `T` copies of a `[B, C, H, W]` frame batch.
pub fn repeat_frames(image: &Tensor, timesteps: usize) -> Result<Tensor> {
    if timesteps == 0 {
        return param_err("timesteps must be at least 1");
    }
    if image.rank() != 4 {
        return param_err(format!("expected [B, C, H, W], got {:?}", image.shape()));
    }
    let mut shape = vec![timesteps];
    shape.extend_from_slice(image.shape());
    let mut data = Vec::with_capacity(image.len() * timesteps);
    for _ in 0..timesteps {
        data.extend_from_slice(image.data());
    }
    Ok(Tensor::new(&shape, data)?)
}

/// Spike encoding of a static image: the frame is the input current at
/// every timestep of a neuron starting from rest.
pub fn encode_static(image: &Tensor, timesteps: usize, params: &NeuronParams) -> Result<SpikeTensor> {
    if let Some(bad) = image.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return param_err(format!("pixel value {bad} outside [0, 1]"));
    }
    let frames = repeat_frames(image, timesteps)?;
    SpikeTensor::binary(run_sequence(params, &frames)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub x: u32,
    pub y: u32,
    pub t: u64,
    /// 0 = OFF, 1 = ON.
    pub p: u8,
}

/// Events ordered by timestamp; `raw_bin` is the width of one raw time bin.
#[derive(Debug, Clone, PartialEq)]
pub struct EventStream {
    events: Vec<Event>,
    raw_bin: u64,
}

impl EventStream {
    /// Sorts by timestamp (stable, so simultaneous events keep their order).
    pub fn new(mut events: Vec<Event>, raw_bin: u64) -> Result<Self> {
        if raw_bin == 0 {
            return param_err("raw bin width must be positive");
        }
        if let Some(i) = events.iter().position(|e| e.p > 1) {
            return Err(Error::Event {
                index: i,
                msg: format!("polarity {} not in {{0, 1}}", events[i].p),
            });
        }
        events.sort_by_key(|e| e.t);
        Ok(EventStream { events, raw_bin })
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn raw_bin(&self) -> u64 {
        self.raw_bin
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// Histograms events into `[T, 2, h, w]` frames; frame `t` sums raw bins
/// `α·t .. α·(t+1) - 1`, channel = polarity.
pub fn bin_events(stream: &EventStream, alpha: usize, timesteps: usize, geometry: (usize, usize)) -> Result<Tensor> {
    if alpha == 0 || timesteps == 0 {
        return param_err("alpha and timesteps must be at least 1");
    }
    let (h, w) = geometry;
    let mut frames = Tensor::zeros(&[timesteps, 2, h, w]);
    let span = stream.raw_bin * alpha as u64;
    for (index, e) in stream.events.iter().enumerate() {
        if e.x as usize >= w || e.y as usize >= h {
            return Err(Error::Event {
                index,
                msg: format!("coordinate ({}, {}) outside {w}x{h}", e.x, e.y),
            });
        }
        let frame = e.t / span;
        if frame >= timesteps as u64 {
            return Err(Error::Event {
                index,
                msg: format!("timestamp {} falls in frame {frame}, beyond {timesteps} frames", e.t),
            });
        }
        let idx = [frame as usize, e.p as usize, e.y as usize, e.x as usize];
        let v = frames.get(&idx);
        frames.set(&idx, v + 1.0);
    }
    Ok(frames)
}

/// Zeroes pixels whose total event count exceeds `mean + k·σ` over all
/// pixels. Returns the cleaned frames and the removed `(y, x)` positions.
pub fn remove_hot_pixels(frames: &Tensor, k: f64) -> Result<(Tensor, Vec<(usize, usize)>)> {
    let s = frames.shape();
    if s.len() != 4 {
        return param_err(format!("expected [T, 2, h, w] frames, got {s:?}"));
    }
    let (h, w) = (s[2], s[3]);
    let mut counts = vec![0.0; h * w];
    for (i, v) in frames.data().iter().enumerate() {
        counts[i % (h * w)] += v;
    }
    let n = counts.len() as f64;
    let mean = counts.iter().sum::<f64>() / n;
    let std = (counts.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / n).sqrt();
    let hot: Vec<usize> = (0..counts.len()).filter(|&i| counts[i] > mean + k * std).collect();
    let mut out = frames.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if hot.binary_search(&(i % (h * w))).is_ok() {
            *v = 0.0;
        }
    }
    Ok((out, hot.iter().map(|&i| (i / w, i % w)).collect()))
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub embed: PatchEmbed,
    pub blocks: Vec<Block>,
}

/// Which residual inside a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShortcutSite {
    Mixer,
    Mlp,
}

impl fmt::Display for ShortcutSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShortcutSite::Mixer => "mixer",
            ShortcutSite::Mlp => "mlp",
        })
    }
}

impl FromStr for ShortcutSite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mixer" => Ok(ShortcutSite::Mixer),
            "mlp" => Ok(ShortcutSite::Mlp),
            _ => Err(Error::Parse(format!("unknown shortcut site {s:?} (mixer, mlp)"))),
        }
    }
}

/// Everything observed during one forward pass.
#[derive(Debug, Clone)]
pub struct Inspection {
    pub logits: Tensor,
    pub records: Vec<LayerRecord>,
    pub transmissions: Vec<Transmission>,
    /// `(C, H, W)` after each stage.
    pub stage_shapes: Vec<(usize, usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct Network {
    spec: ArchSpec,
    neuron: NeuronParams,
    store: ParamStore,
    stages: Vec<Stage>,
    head: Head,
}

/// Builds a freshly initialised network; weights depend only on `spec.seed`.
pub fn build(spec: &ArchSpec) -> Result<Network> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut store = ParamStore::new();
    let mut stages = Vec::with_capacity(spec.stages.len());
    let mut cin = spec.in_channels;
    for (i, st) in spec.stages.iter().enumerate() {
        let depth = if i == 0 { spec.first_embed_depth() } else { 1 };
        let embed = PatchEmbed::new(&mut store, &mut rng, &format!("s{i}.embed"), st.embed, cin, st.channels, depth)?;
        let mut blocks = Vec::with_capacity(st.blocks);
        for j in 0..st.blocks {
            let name = format!("s{i}.b{j}");
            blocks.push(Block {
                mixer: Mixer::new(&mut store, &mut rng, &format!("{name}.mixer"), st.mixer, st.channels, spec.ssa_scale)?,
                mlp: Mlp::new(&mut store, &mut rng, &format!("{name}.mlp"), st.channels, spec.mlp_ratio)?,
                mixer_shortcut: spec.shortcut,
                mlp_shortcut: spec.shortcut,
                name,
            });
        }
        stages.push(Stage { embed, blocks });
        cin = st.channels;
    }
    let head = Head::new(&mut store, &mut rng, "head", cin, spec.num_classes);
    Ok(Network {
        spec: spec.clone(),
        neuron: spec.neuron()?,
        store,
        stages,
        head,
    })
}

impl Network {
    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn neuron(&self) -> &NeuronParams {
        &self.neuron
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    /// Learnable scalars: kernels, linear weights, BN affine and biases.
    pub fn param_count(&self) -> usize {
        self.store.learnable_count()
    }

    pub fn set_shortcut(&mut self, stage: usize, block: usize, site: ShortcutSite, kind: ShortcutKind) -> Result<()> {
        let b = self
            .stages
            .get_mut(stage)
            .and_then(|s| s.blocks.get_mut(block))
            .ok_or_else(|| Error::Param(format!("no block {block} in stage {stage}")))?;
        match site {
            ShortcutSite::Mixer => b.mixer_shortcut = kind,
            ShortcutSite::Mlp => b.mlp_shortcut = kind,
        }
        Ok(())
    }

    pub fn forward_context(&self, phase: Phase) -> Result<Forward<'_>> {
        Forward::new(&self.store, self.neuron, self.spec.timesteps, phase)
    }

    /// Input currents as `[T·B, C, H, W]`. Accepts a static `[B, C, H, W]`
    /// batch (repeated over time) or `[T, B, C, H, W]` frames.
    pub fn input_currents(&self, x: &Tensor) -> Result<Tensor> {
        let s = self.spec.timesteps;
        let frames = match x.rank() {
            4 => repeat_frames(x, s)?,
            5 if x.shape()[0] == s => x.clone(),
            5 => return param_err(format!("input has {} timesteps, network expects {s}", x.shape()[0])),
            _ => return param_err(format!("expected [B, C, H, W] or [T, B, C, H, W], got {:?}", x.shape())),
        };
        let fs = frames.shape();
        let want = (self.spec.in_channels, self.spec.height, self.spec.width);
        if (fs[2], fs[3], fs[4]) != want {
            return param_err(format!(
                "input geometry {}x{}x{} does not match network {}x{}x{}",
                fs[2], fs[3], fs[4], want.0, want.1, want.2
            ));
        }
        Ok(frames.reshape(&[fs[0] * fs[1], fs[2], fs[3], fs[4]])?)
    }

    fn run_inner(&self, ctx: &mut Forward, x: &Tensor) -> Result<(Var, Vec<(usize, usize, usize)>)> {
        let currents = self.input_currents(x)?;
        let mut s = ctx.stream(currents, Domain::Membrane)?;
        let mut shapes = Vec::with_capacity(self.stages.len());
        for (i, st) in self.stages.iter().enumerate() {
            ctx.set_scope(i, Part::PatchEmbed);
            s = st.embed.forward(ctx, s, i == 0)?;
            for b in &st.blocks {
                s = b.forward(ctx, s)?;
            }
            let sh = ctx.value(s.var).shape();
            shapes.push((sh[1], sh[2], sh[3]));
        }
        ctx.set_scope(self.stages.len().saturating_sub(1), Part::Classifier);
        let logits = self.head.forward(ctx, s)?;
        Ok((logits, shapes))
    }

    /// Logits `[B, classes]` as a graph value of `ctx`.
    pub fn run(&self, ctx: &mut Forward, x: &Tensor) -> Result<Var> {
        Ok(self.run_inner(ctx, x)?.0)
    }

    /// Inference logits (running BN statistics, exact spikes).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut ctx = self.forward_context(Phase::Eval)?;
        let out = self.run(&mut ctx, x)?;
        Ok(ctx.value(out).clone())
    }

    /// Forward pass that keeps layer records, inter-block spike tensors and stage shapes.
    pub fn inspect(&self, x: &Tensor, phase: Phase, spike_fn: SpikeFn) -> Result<Inspection> {
        let mut ctx = self.forward_context(phase)?.with_spike_fn(spike_fn).with_transmissions();
        let (out, stage_shapes) = self.run_inner(&mut ctx, x)?;
        let logits = ctx.value(out).clone();
        let (records, transmissions) = ctx.into_records();
        Ok(Inspection {
            logits,
            records,
            transmissions,
            stage_shapes,
        })
    }
}
