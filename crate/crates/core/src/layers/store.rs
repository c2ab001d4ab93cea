use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use spikelab_numcore::{BatchStats, Graph, Tensor, Var};

use crate::error::{Error, Result};
use crate::neuron::{self, NeuronParams, SpikeFn};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamRole {
    Weight,
    Bias,
    BnScale,
    BnShift,
    RunningMean,
    RunningVar,
}

impl ParamRole {
    pub fn learnable(self) -> bool {
        !matches!(self, ParamRole::RunningMean | ParamRole::RunningVar)
    }

    /// Only kernels and linear weights take weight decay.
    pub fn decays(self) -> bool {
        self == ParamRole::Weight
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Slot {
    name: String,
    role: ParamRole,
    value: Tensor,
}

#[derive(Serialize, Deserialize)]
struct SlotRecord {
    name: String,
    role: ParamRole,
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Every tensor a network owns: learnable parameters and BN running statistics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    slots: Vec<Slot>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, role: ParamRole, value: Tensor) -> ParamId {
        self.slots.push(Slot {
            name: name.into(),
            role,
            value,
        });
        ParamId(self.slots.len() - 1)
    }

    /// Normal weights with variance `gain / fan_in`.
    pub fn add_normal<R: Rng>(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> ParamId {
        let std = (gain / fan_in.max(1) as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        });
        self.add(name, ParamRole::Weight, t)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.slots.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.slots[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.slots[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = &mut self.slots[id.0];
        if slot.value.shape() != value.shape() {
            return Err(Error::Param(format!(
                "{}: shape {:?} does not match {:?}",
                slot.name,
                value.shape(),
                slot.value.shape()
            )));
        }
        slot.value = value;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.slots[id.0].name
    }

    pub fn role(&self, id: ParamId) -> ParamRole {
        self.slots[id.0].role
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.slots.iter().position(|s| s.name == name).map(ParamId)
    }

    /// Total learnable scalars.
    pub fn learnable_count(&self) -> usize {
        self.slots.iter().filter(|s| s.role.learnable()).map(|s| s.value.len()).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        let records: Vec<SlotRecord> = self
            .slots
            .iter()
            .map(|s| SlotRecord {
                name: s.name.clone(),
                role: s.role,
                shape: s.value.shape().to_vec(),
                data: s.value.data().to_vec(),
            })
            .collect();
        serde_json::to_string(&records).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Loads values saved by [`ParamStore::to_json`] into a store with the same layout.
    pub fn load_json(&mut self, text: &str) -> Result<()> {
        let records: Vec<SlotRecord> = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        if records.len() != self.slots.len() {
            return Err(Error::Parse(format!(
                "parameter file holds {} tensors, network has {}",
                records.len(),
                self.slots.len()
            )));
        }
        let mut loaded = Vec::with_capacity(records.len());
        for (slot, rec) in self.slots.iter().zip(records) {
            if slot.name != rec.name || slot.role != rec.role || slot.value.shape() != rec.shape.as_slice() {
                return Err(Error::Parse(format!("parameter {} does not match {}", rec.name, slot.name)));
            }
            loaded.push(Tensor::new(&rec.shape, rec.data)?);
        }
        for (slot, t) in self.slots.iter_mut().zip(loaded) {
            slot.value = t;
        }
        Ok(())
    }
}

/// Value domain of a stream flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    /// Spikes in {0, 1}.
    Binary,
    /// Summed spikes in {0, 1, 2}.
    Ternary,
    /// Real-valued membrane potential or input current.
    Membrane,
}

impl Domain {
    pub fn is_spike(self) -> bool {
        self != Domain::Membrane
    }
}

/// A graph value of shape `[T·B, C, H, W]` (time-major) with its domain tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stream {
    pub var: Var,
    pub domain: Domain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Batch statistics in BN, parameters require gradients.
    Train,
    /// Running statistics in BN, parameters are constants.
    Eval,
}

/// Column of the per-stage energy breakdown a layer belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Part {
    PatchEmbed,
    TokenMix,
    Mlp,
    Classifier,
}

impl Part {
    pub fn label(self) -> &'static str {
        match self {
            Part::PatchEmbed => "patch_embed",
            Part::TokenMix => "token_mix",
            Part::Mlp => "mlp",
            Part::Classifier => "classifier",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        [Part::PatchEmbed, Part::TokenMix, Part::Mlp, Part::Classifier]
            .into_iter()
            .find(|p| p.label() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    Conv,
    DepthwiseConv,
    Linear,
    /// Product of a spike matrix with another operand (attention).
    SpikeMatmul,
}

impl LayerKind {
    pub fn label(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::DepthwiseConv => "dwconv",
            LayerKind::Linear => "linear",
            LayerKind::SpikeMatmul => "spike_matmul",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        [LayerKind::Conv, LayerKind::DepthwiseConv, LayerKind::Linear, LayerKind::SpikeMatmul]
            .into_iter()
            .find(|k| k.label() == s)
    }
}

/// One MAC-bearing layer as seen during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord {
    pub name: String,
    pub stage: usize,
    pub part: Part,
    pub kind: LayerKind,
    /// FLOPs for one sample at one timestep.
    pub flops: u64,
    /// Mean value of the layer's input over time, batch and elements.
    pub input_mean: f64,
    pub input_max: f64,
    /// Consumes the encoder output directly; charged as MAC.
    pub encoding: bool,
    pub timesteps: usize,
}

/// A spike-domain tensor handed from one block to the next.
#[derive(Debug, Clone, PartialEq)]
pub struct Transmission {
    pub site: String,
    pub domain: Domain,
    pub values: Tensor,
}

pub(crate) struct BnUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: BatchStats,
}

/// BN running-statistic momentum: `running = 0.9·running + 0.1·batch`.
pub const BN_MOMENTUM: f64 = 0.9;

/// State of one forward pass: the autodiff tape, parameter bindings, and
/// everything recorded along the way.
pub struct Forward<'a> {
    graph: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    phase: Phase,
    spike_fn: SpikeFn,
    neuron: NeuronParams,
    timesteps: usize,
    stage: usize,
    part: Part,
    bn_updates: Vec<BnUpdate>,
    records: Vec<LayerRecord>,
    transmissions: Option<Vec<Transmission>>,
}

impl<'a> Forward<'a> {
    pub fn new(store: &'a ParamStore, neuron: NeuronParams, timesteps: usize, phase: Phase) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::Param("timesteps must be at least 1".into()));
        }
        Ok(Forward {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            phase,
            spike_fn: SpikeFn::Heaviside,
            neuron,
            timesteps,
            stage: 0,
            part: Part::PatchEmbed,
            bn_updates: Vec::new(),
            records: Vec::new(),
            transmissions: None,
        })
    }

    pub fn with_spike_fn(mut self, f: SpikeFn) -> Self {
        self.spike_fn = f;
        self
    }

    /// Keeps a copy of every spike tensor passed between blocks.
    pub fn with_transmissions(mut self) -> Self {
        self.transmissions = Some(Vec::new());
        self
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut Graph {
        &mut self.graph
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn spike_fn(&self) -> SpikeFn {
        self.spike_fn
    }

    pub fn neuron(&self) -> &NeuronParams {
        &self.neuron
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.graph.value(v)
    }

    pub fn set_scope(&mut self, stage: usize, part: Part) {
        self.stage = stage;
        self.part = part;
    }

    pub fn scope(&self) -> (usize, Part) {
        (self.stage, self.part)
    }

    /// Graph leaf for a stored tensor, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let grad = self.phase == Phase::Train && self.store.role(id).learnable();
        let v = self.graph.leaf(self.store.get(id).clone(), grad);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.graph.constant(t)
    }

    /// Wraps a `[T·B, C, H, W]` tensor as a stream, checking the tag.
    pub fn stream(&mut self, t: Tensor, domain: Domain) -> Result<Stream> {
        check_domain(&t, domain, "stream input")?;
        Ok(Stream {
            var: self.graph.constant(t),
            domain,
        })
    }

    pub fn batch_norm(&mut self, x: Var, gamma: ParamId, beta: ParamId, mean: ParamId, var: ParamId) -> Result<Var> {
        let (g, b) = (self.param(gamma), self.param(beta));
        match self.phase {
            Phase::Train => {
                let (y, stats) = self.graph.batch_norm_train(x, g, b)?;
                self.bn_updates.push(BnUpdate { mean, var, stats });
                Ok(y)
            }
            Phase::Eval => {
                let (m, v) = (self.store.get(mean).data(), self.store.get(var).data());
                Ok(self.graph.batch_norm_eval(x, g, b, m, v)?)
            }
        }
    }

    /// Runs the network neuron over the time axis of a `[T·B, ...]` value.
    pub fn fire(&mut self, current: Var) -> Result<Var> {
        let shape = self.graph.shape(current).to_vec();
        let total: usize = shape.iter().product();
        let t = self.timesteps;
        if shape.first().is_none_or(|&n| n % t != 0) {
            return Err(Error::Param(format!("leading axis of {shape:?} is not a multiple of T = {t}")));
        }
        let flat = self.graph.reshape(current, &[t, total / t])?;
        let spikes = neuron::lif(&mut self.graph, flat, &self.neuron, self.spike_fn)?;
        Ok(self.graph.reshape(spikes, &shape)?)
    }

    /// Spike view of a stream: membrane values go through the neuron, spike
    /// streams pass unchanged. The result is recorded as a transmission.
    pub fn spikes(&mut self, x: Stream, site: &str) -> Result<Stream> {
        let out = match x.domain {
            Domain::Membrane => Stream {
                var: self.fire(x.var)?,
                domain: Domain::Binary,
            },
            _ => x,
        };
        self.log(site, out);
        Ok(out)
    }

    /// Always runs the neuron, treating any non-ternary stream as input
    /// current. The result is recorded as a transmission.
    pub fn fire_stream(&mut self, x: Stream, site: &str) -> Result<Stream> {
        if x.domain == Domain::Ternary {
            return Err(Error::Domain(format!("{site}: ternary input where binary spikes are required")));
        }
        let out = Stream {
            var: self.fire(x.var)?,
            domain: Domain::Binary,
        };
        self.log(site, out);
        Ok(out)
    }

    fn log(&mut self, site: &str, s: Stream) {
        if let Some(log) = self.transmissions.as_mut() {
            log.push(Transmission {
                site: site.to_string(),
                domain: s.domain,
                values: self.graph.value(s.var).clone(),
            });
        }
    }

    pub(crate) fn record(&mut self, name: &str, kind: LayerKind, flops: u64, input: Var, encoding: bool) {
        let x = self.graph.value(input);
        self.records.push(LayerRecord {
            name: name.to_string(),
            stage: self.stage,
            part: self.part,
            kind,
            flops,
            input_mean: x.mean(),
            input_max: x.max(),
            encoding,
            timesteps: self.timesteps,
        });
    }

    pub fn records(&self) -> &[LayerRecord] {
        &self.records
    }

    pub fn transmissions(&self) -> &[Transmission] {
        self.transmissions.as_deref().unwrap_or(&[])
    }

    /// Backpropagates `loss` and returns the gradient of every learnable
    /// parameter touched by the pass, in store order.
    pub fn backward(&mut self, loss: Var) -> Result<Vec<(ParamId, Tensor)>> {
        self.graph.backward(loss)?;
        let mut grads = Vec::new();
        for (i, v) in self.bound.iter().enumerate() {
            let Some(v) = *v else { continue };
            let id = ParamId(i);
            if !self.store.role(id).learnable() {
                continue;
            }
            let g = self
                .graph
                .grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(self.store.get(id).shape()));
            grads.push((id, g));
        }
        Ok(grads)
    }

    pub(crate) fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }

    pub fn into_records(self) -> (Vec<LayerRecord>, Vec<Transmission>) {
        (self.records, self.transmissions.unwrap_or_default())
    }
}

/// Folds batch statistics into the running estimates (unbiased variance).
pub(crate) fn apply_bn_updates(store: &mut ParamStore, updates: Vec<BnUpdate>) {
    for u in updates {
        let n = u.stats.count as f64;
        let correction = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        for (r, b) in store.get_mut(u.mean).data_mut().iter_mut().zip(&u.stats.mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
        for (r, b) in store.get_mut(u.var).data_mut().iter_mut().zip(&u.stats.var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b * correction;
        }
    }
}

/// Verifies that every value of `t` is allowed in `domain`.
pub fn check_domain(t: &Tensor, domain: Domain, what: &str) -> Result<()> {
    let ok = |v: f64| match domain {
        Domain::Binary => v == 0.0 || v == 1.0,
        Domain::Ternary => v == 0.0 || v == 1.0 || v == 2.0,
        Domain::Membrane => v.is_finite(),
    };
    match t.data().iter().find(|&&v| !ok(v)) {
        Some(bad) => Err(Error::Domain(format!("{what}: value {bad} is not allowed in {domain:?} domain"))),
        None => Ok(()),
    }
}
