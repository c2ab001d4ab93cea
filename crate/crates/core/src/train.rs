//! Surrogate-gradient training, evaluation and the toy ablations.

use std::fmt::{self, Write as _};
use std::f64::consts::TAU;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use spikelab_numcore::{Graph, Tensor, Var};

use crate::error::{param_err, Error, Result};
use crate::layers::{apply_bn_updates, ParamId, ParamStore, Phase, TokenMixer, PatchEmbedKind};
use crate::model::{build, ArchSpec, Network};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    AdamW,
    Momentum,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::AdamW => "adamw",
            OptimizerKind::Momentum => "momentum",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adamw" => Ok(OptimizerKind::AdamW),
            "momentum" | "sgd" => Ok(OptimizerKind::Momentum),
            _ => Err(Error::Parse(format!("unknown optimizer {s:?} (adamw, momentum)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 3e-3,
            weight_decay: 0.01,
            label_smoothing: 0.1,
            seed: 0,
            optimizer: OptimizerKind::AdamW,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return param_err(format!("learning rate must be positive, got {}", self.lr));
        }
        check_smoothing(self.label_smoothing)?;
        if self.batch_size == 0 {
            return param_err("batch size must be at least 1");
        }
        if !(self.weight_decay >= 0.0) {
            return param_err(format!("weight decay must be non-negative, got {}", self.weight_decay));
        }
        Ok(())
    }
}

fn check_smoothing(s: f64) -> Result<()> {
    if (0.0..1.0).contains(&s) {
        Ok(())
    } else {
        param_err(format!("label smoothing must lie in [0, 1), got {s}"))
    }
}

/// Rows of `(1 - s)·onehot + s/K`.
pub fn smoothed_targets(labels: &[usize], classes: usize, smoothing: f64) -> Result<Tensor> {
    check_smoothing(smoothing)?;
    if classes == 0 {
        return param_err("need at least one class");
    }
    let off = smoothing / classes as f64;
    let mut t = Tensor::full(&[labels.len(), classes], off);
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return param_err(format!("label {y} out of range for {classes} classes"));
        }
        t.set(&[i, y], 1.0 - smoothing + off);
    }
    Ok(t)
}

/// Mean cross-entropy of `[B, K]` logits against smoothed one-hot labels.
pub fn loss_ce_smoothed(logits: &Tensor, labels: &[usize], smoothing: f64) -> Result<f64> {
    let mut g = Graph::new();
    let v = g.constant(logits.clone());
    let loss = graph_loss(&mut g, v, labels, smoothing)?;
    Ok(g.value(loss).data()[0])
}

/// Graph form of [`loss_ce_smoothed`].
pub fn graph_loss(g: &mut Graph, logits: Var, labels: &[usize], smoothing: f64) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return param_err(format!("logits {shape:?} do not match {} labels", labels.len()));
    }
    let targets = smoothed_targets(labels, shape[1], smoothing)?;
    Ok(g.softmax_cross_entropy(logits, targets)?)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(&logits.data()[i * k..(i + 1) * k]) == y)
        .count()
}

/// Labelled images `[N, C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return param_err(format!("images {:?} do not match {} labels", images.shape(), labels.len()));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return param_err(format!("label {y} out of range for {num_classes} classes"));
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
        })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Images and labels at `idx`, in that order.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let parts: Vec<Tensor> = idx.iter().map(|&i| self.images.outer(i)).collect();
        let images = Tensor::stack(&parts).expect("equal image shapes");
        (images, idx.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Self> {
        Dataset::new(self.images.clone(), labels, self.num_classes)
    }
}

pub const SYNTH_SIDE: usize = 16;
pub const SYNTH_TRAIN: usize = 2000;
pub const SYNTH_TEST: usize = 500;
/// Label of fine-texture images; smooth images are class 0.
pub const HIGH_FREQ: usize = 1;

/// Two-class frequency discrimination task on 1×16×16 images in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFreqDataset {
    pub seed: u64,
    pub train: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthTask {
    /// Smooth fields (period ≥ 8 px); class 1 adds a period 2–3 px texture
    /// over the whole image.
    Mixed,
    /// Control: both classes smooth; class 1 is brighter.
    LowOnly,
}

impl SyntheticFreqDataset {
    pub fn generate(seed: u64) -> Result<Self> {
        Self::generate_sized(seed, SynthTask::Mixed, SYNTH_TRAIN, SYNTH_TEST)
    }

    /// Balanced splits; class alternates with the sample index.
    pub fn generate_sized(seed: u64, task: SynthTask, n_train: usize, n_test: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut split = |n: usize| -> Result<Dataset> {
            let s = SYNTH_SIDE;
            let mut data = Vec::with_capacity(n * s * s);
            let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
            for &y in &labels {
                data.extend(synth_image(&mut rng, task, y));
            }
            Dataset::new(Tensor::new(&[n, 1, s, s], data)?, labels, 2)
        };
        let train = split(n_train)?;
        let test = split(n_test)?;
        Ok(SyntheticFreqDataset { seed, train, test })
    }
}

/// Pixel noise standard deviation.
pub const SYNTH_NOISE: f64 = 0.08;
const TEXTURE_AMP: (f64, f64) = (0.15, 0.3);

/// Smooth field in [0, 1]: a slow cosine (period 8–16 px) or a broad blob.
struct SmoothField {
    blob: bool,
    dir: (f64, f64),
    period: f64,
    phase: f64,
    center: (f64, f64),
}

impl SmoothField {
    fn sample<R: Rng>(rng: &mut R) -> Self {
        let angle: f64 = rng.random_range(0.0..TAU);
        SmoothField {
            blob: rng.random_bool(0.5),
            dir: (angle.cos(), angle.sin()),
            period: rng.random_range(8.0..16.0),
            phase: rng.random_range(0.0..TAU),
            center: (rng.random_range(0.0..16.0), rng.random_range(0.0..16.0)),
        }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        if self.blob {
            let sigma = self.period / 2.0;
            let d2 = (x - self.center.0).powi(2) + (y - self.center.1).powi(2);
            (-d2 / (2.0 * sigma * sigma)).exp()
        } else {
            0.5 + 0.5 * (TAU * (x * self.dir.0 + y * self.dir.1) / self.period + self.phase).cos()
        }
    }
}

/// Zero-mean texture in [-1, 1] with period 2 or 3 px along a random axis.
fn fine_texture<R: Rng>(rng: &mut R) -> impl Fn(usize, usize) -> f64 {
    let period = if rng.random_bool(0.5) { 2 } else { 3 };
    let axis = rng.random_range(0..3usize);
    let shift = rng.random_range(0..period);
    move |x, y| {
        let u = match axis {
            0 => x + y,
            1 => x,
            _ => y,
        } + shift;
        (TAU * u as f64 / period as f64).cos()
    }
}

fn synth_image<R: Rng>(rng: &mut R, task: SynthTask, label: usize) -> Vec<f64> {
    let s = SYNTH_SIDE;
    let field = SmoothField::sample(rng);
    let level: f64 = rng.random_range(0.2..0.4);
    let contrast: f64 = rng.random_range(0.2..0.6);
    let texture = fine_texture(rng);
    let amp = rng.random_range(TEXTURE_AMP.0..TEXTURE_AMP.1);
    let textured = task == SynthTask::Mixed && label == HIGH_FREQ;
    let brighter = task == SynthTask::LowOnly && label == HIGH_FREQ;
    let mut out = Vec::with_capacity(s * s);
    for y in 0..s {
        for x in 0..s {
            let mut v = level + contrast * field.at(x as f64, y as f64);
            if textured {
                v += amp * texture(x, y);
            }
            if brighter {
                v += 0.25;
            }
            let noise: f64 = rng.sample(StandardNormal);
            out.push((v + SYNTH_NOISE * noise).clamp(0.0, 1.0));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,train_acc,test_loss,test_acc";

/// Per-epoch CSV; floats use the shortest round-tripping rendering.
pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in rows {
        let _ = writeln!(
            out,
            "{},{:?},{:?},{:?},{:?}",
            m.epoch, m.train_loss, m.train_acc, m.test_loss, m.test_acc
        );
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<EpochMetrics>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(METRICS_HEADER) {
        return Err(Error::Parse(format!("metrics CSV must start with {METRICS_HEADER:?}")));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let num = |i: usize| -> Result<f64> {
                f.get(i)
                    .and_then(|s| s.trim().parse().ok())
                    .ok_or_else(|| Error::Parse(format!("bad metrics row {l:?}")))
            };
            if f.len() != 5 {
                return Err(Error::Parse(format!("bad metrics row {l:?}")));
            }
            Ok(EpochMetrics {
                epoch: f[0].trim().parse().map_err(|_| Error::Parse(format!("bad epoch in {l:?}")))?,
                train_loss: num(1)?,
                train_acc: num(2)?,
                test_loss: num(3)?,
                test_acc: num(4)?,
            })
        })
        .collect()
}

const EVAL_BATCH: usize = 250;

/// Top-1 accuracy and mean unsmoothed cross-entropy in eval mode.
pub fn evaluate(net: &Network, data: &Dataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return param_err("cannot evaluate on an empty dataset");
    }
    let (mut hits, mut loss) = (0usize, 0.0);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, y) = data.batch(chunk);
        let logits = net.forward(&x)?;
        hits += correct(&logits, &y);
        loss += loss_ce_smoothed(&logits, &y, 0.0)? * chunk.len() as f64;
    }
    let n = data.len() as f64;
    Ok((hits as f64 / n, loss / n))
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const MOMENTUM: f64 = 0.9;

/// Optimizer state, one slot per store entry.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    step: i32,
    first: Vec<Option<Tensor>>,
    second: Vec<Option<Tensor>>,
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig, store: &ParamStore) -> Self {
        Optimizer {
            kind: cfg.optimizer,
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            step: 0,
            first: vec![None; store.len()],
            second: vec![None; store.len()],
        }
    }

    /// Applies one update. Weight decay is decoupled and touches weights only.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) {
        self.step += 1;
        let (bc1, bc2) = (1.0 - ADAM_BETA1.powi(self.step), 1.0 - ADAM_BETA2.powi(self.step));
        for (id, g) in grads {
            let i = id.index();
            let decay = if store.role(*id).decays() { self.lr * self.weight_decay } else { 0.0 };
            let m = self.first[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            match self.kind {
                OptimizerKind::Momentum => {
                    let p = store.get_mut(*id).data_mut();
                    for ((p, m), g) in p.iter_mut().zip(m.data_mut()).zip(g.data()) {
                        *m = MOMENTUM * *m + g;
                        *p -= decay * *p + self.lr * *m;
                    }
                }
                OptimizerKind::AdamW => {
                    let v = self.second[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
                    let p = store.get_mut(*id).data_mut();
                    for (((p, m), v), g) in p.iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                        let update = (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS);
                        *p -= decay * *p + self.lr * update;
                    }
                }
            }
        }
    }
}

/// Loss and gradients of one batch in train mode. Batch-norm running
/// statistics are updated in `net` as a side effect.
pub fn train_step(net: &mut Network, x: &Tensor, y: &[usize], smoothing: f64) -> Result<(f64, Vec<(ParamId, Tensor)>)> {
    let (loss, grads, updates) = {
        let mut ctx = net.forward_context(Phase::Train)?;
        let logits = net.run(&mut ctx, x)?;
        let loss = graph_loss(ctx.graph_mut(), logits, y, smoothing)?;
        let value = ctx.value(loss).data()[0];
        let grads = ctx.backward(loss)?;
        (value, grads, ctx.take_bn_updates())
    };
    apply_bn_updates(net.store_mut(), updates);
    Ok((loss, grads))
}

/// Trains in place with BPTT through all timesteps; metrics are re-measured
/// in eval mode after every epoch.
pub fn train(net: &mut Network, train_set: &Dataset, test_set: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if train_set.is_empty() || test_set.is_empty() {
        return param_err("training and test sets must be non-empty");
    }
    let classes = net.spec().num_classes;
    if train_set.num_classes() > classes || test_set.num_classes() > classes {
        return param_err(format!("dataset has more classes than the network's {classes}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg, net.store());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = train_set.batch(chunk);
            let (loss, grads) = train_step(net, &x, &y, cfg.label_smoothing)?;
            if !loss.is_finite() || grads.iter().any(|(_, g)| !g.all_finite()) {
                return Err(Error::Divergence(format!("epoch {epoch}, batch {b}: loss {loss}")));
            }
            opt.step(net.store_mut(), &grads);
        }
        let (train_acc, train_loss) = evaluate(net, train_set)?;
        let (test_acc, test_loss) = evaluate(net, test_set)?;
        if !train_loss.is_finite() || !test_loss.is_finite() {
            return Err(Error::Divergence(format!("epoch {epoch}: evaluation loss is not finite")));
        }
        history.push(EpochMetrics {
            epoch,
            train_loss,
            train_acc,
            test_loss,
            test_acc,
        });
    }
    Ok(history)
}

/// Per-seed test accuracies of two matched variants.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub baseline: String,
    pub candidate: String,
    pub seeds: Vec<u64>,
    pub baseline_acc: Vec<f64>,
    pub candidate_acc: Vec<f64>,
    pub param_count: usize,
}

impl AblationReport {
    /// Fraction of seeds where the candidate is at least as accurate.
    pub fn fraction_at_least(&self) -> f64 {
        let wins = self
            .candidate_acc
            .iter()
            .zip(&self.baseline_acc)
            .filter(|(c, b)| c >= b)
            .count();
        wins as f64 / self.seeds.len() as f64
    }

    pub const CSV_HEADER: &'static str = "seed,variant,test_acc";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for (i, s) in self.seeds.iter().enumerate() {
            let _ = writeln!(out, "{s},{},{:?}", self.baseline, self.baseline_acc[i]);
            let _ = writeln!(out, "{s},{},{:?}", self.candidate, self.candidate_acc[i]);
        }
        out
    }

    /// Rebuilds a report from [`AblationReport::to_csv`] output.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        if lines.next().map(str::trim) != Some(Self::CSV_HEADER) {
            return Err(Error::Parse(format!("ablation CSV must start with {:?}", Self::CSV_HEADER)));
        }
        let rows: Vec<(u64, String, f64)> = lines
            .map(|l| {
                let f: Vec<&str> = l.split(',').map(str::trim).collect();
                match (f.len(), f.first().and_then(|s| s.parse().ok()), f.get(2).and_then(|s| s.parse().ok())) {
                    (3, Some(seed), Some(acc)) => Ok((seed, f[1].to_string(), acc)),
                    _ => Err(Error::Parse(format!("bad ablation row {l:?}"))),
                }
            })
            .collect::<Result<_>>()?;
        if rows.is_empty() || rows.len() % 2 != 0 {
            return Err(Error::Parse("ablation CSV needs one baseline and one candidate row per seed".into()));
        }
        let (baseline, candidate) = (rows[0].1.clone(), rows[1].1.clone());
        let mut report = AblationReport {
            baseline,
            candidate,
            seeds: Vec::new(),
            baseline_acc: Vec::new(),
            candidate_acc: Vec::new(),
            param_count: 0,
        };
        for pair in rows.chunks(2) {
            if pair[0].0 != pair[1].0 || pair[0].1 != report.baseline || pair[1].1 != report.candidate {
                return Err(Error::Parse(format!("mismatched ablation rows for seed {}", pair[0].0)));
            }
            report.seeds.push(pair[0].0);
            report.baseline_acc.push(pair[0].2);
            report.candidate_acc.push(pair[1].2);
        }
        Ok(report)
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        for (i, s) in self.seeds.iter().enumerate() {
            let _ = writeln!(
                out,
                "seed {s}: {} {:.4}  {} {:.4}",
                self.baseline, self.baseline_acc[i], self.candidate, self.candidate_acc[i]
            );
        }
        let _ = writeln!(
            out,
            "{} >= {} in {}/{} seeds",
            self.candidate,
            self.baseline,
            (self.fraction_at_least() * self.seeds.len() as f64).round(),
            self.seeds.len()
        );
        out
    }
}

/// Shared protocol of the ablations: each seed drives data, init and
/// shuffling; both variants see identical data and identical initial weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationSetup {
    pub base: ArchSpec,
    pub train: TrainConfig,
    pub task: SynthTask,
    pub n_train: usize,
    pub n_test: usize,
}

impl AblationSetup {
    /// Two-stage toy on the synthetic task: patch size 2 gives 8×8 then
    /// 4×4 token maps, widths 8 and 16.
    pub fn toy(timesteps: usize) -> Self {
        let mut base = ArchSpec::tiny();
        base.name = "pool-toy".into();
        base.timesteps = timesteps;
        base.patch_size = 2;
        base.stages.truncate(2);
        base.stages[0].channels = 8;
        base.stages[1].channels = 16;
        AblationSetup {
            base,
            train: TrainConfig {
                epochs: 4,
                ..TrainConfig::default()
            },
            task: SynthTask::Mixed,
            n_train: SYNTH_TRAIN,
            n_test: SYNTH_TEST,
        }
    }
}

fn run_pair(
    setup: &AblationSetup,
    seeds: &[u64],
    names: (&str, &str),
    variant: impl Fn(&mut ArchSpec, bool),
) -> Result<AblationReport> {
    if seeds.len() < 5 {
        return param_err(format!("ablations need at least 5 seeds, got {}", seeds.len()));
    }
    let mut report = AblationReport {
        baseline: names.0.to_string(),
        candidate: names.1.to_string(),
        seeds: seeds.to_vec(),
        baseline_acc: Vec::new(),
        candidate_acc: Vec::new(),
        param_count: 0,
    };
    for &seed in seeds {
        let data = SyntheticFreqDataset::generate_sized(seed, setup.task, setup.n_train, setup.n_test)?;
        let cfg = TrainConfig {
            seed,
            ..setup.train.clone()
        };
        let mut counts = [0usize; 2];
        for (slot, candidate) in [false, true].into_iter().enumerate() {
            let mut spec = setup.base.clone();
            spec.seed = seed;
            variant(&mut spec, candidate);
            let mut net = build(&spec)?;
            counts[slot] = net.param_count();
            let history = train(&mut net, &data.train, &data.test, &cfg)?;
            let acc = history.last().map_or(0.0, |m| m.test_acc);
            if candidate {
                report.candidate_acc.push(acc);
            } else {
                report.baseline_acc.push(acc);
            }
        }
        if counts[0] != counts[1] {
            return param_err(format!("variants are not matched: {} vs {} parameters", counts[0], counts[1]));
        }
        report.param_count = counts[0];
    }
    Ok(report)
}

/// All-Avg-Pool vs all-Max-Pool token mixing; the candidate is Max.
pub fn pooling_ablation(seeds: &[u64], setup: &AblationSetup) -> Result<AblationReport> {
    run_pair(setup, seeds, ("avgpool", "maxpool"), |spec, max| {
        for st in &mut spec.stages {
            st.mixer = if max { TokenMixer::MaxPool } else { TokenMixer::AvgPool };
        }
    })
}

/// Embed-Orig vs Embed-Max in every stage after the first; the candidate is Max.
pub fn embed_ablation(seeds: &[u64], setup: &AblationSetup) -> Result<AblationReport> {
    run_pair(setup, seeds, ("embed-orig", "embed-max"), |spec, max| {
        for st in spec.stages.iter_mut().skip(1) {
            st.embed = if max { PatchEmbedKind::Max } else { PatchEmbedKind::Orig };
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothed_loss_closed_forms() {
        let uniform = Tensor::zeros(&[3, 5]);
        let l = loss_ce_smoothed(&uniform, &[0, 2, 4], 0.0).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);
        let l = loss_ce_smoothed(&Tensor::zeros(&[2, 2]), &[0, 1], 0.1).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        let sharp = Tensor::new(&[1, 2], vec![200.0, -200.0]).unwrap();
        assert!(loss_ce_smoothed(&sharp, &[0], 0.0).unwrap() < 1e-12);
        assert!(loss_ce_smoothed(&uniform, &[5, 0, 0], 0.0).is_err());
        assert!(loss_ce_smoothed(&uniform, &[0, 0, 0], 1.0).is_err());
    }

    #[test]
    fn config_invariants() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { lr: 0.0, ..Default::default() },
            TrainConfig { label_smoothing: 1.0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
        assert_eq!("AdamW".parse::<OptimizerKind>().unwrap(), OptimizerKind::AdamW);
    }
}
