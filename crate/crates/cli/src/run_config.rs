//! Run files: one flat sectioned key-value document holding the model,
//! training, data and energy settings of a command.
//!
//! ```text
//! [model]
//! preset = tiny        # or the full [model] + [stage] description
//! timesteps = 4
//!
//! [train]
//! epochs = 10
//! optimizer = adamw
//!
//! [data]
//! task = mixed         # mixed | low_only
//! n_train = 2000
//!
//! [energy]
//! input = synthetic    # synthetic | zero
//! samples = 1
//! ```
//!
//! Every section except `[model]` is optional. Unknown sections and keys
//! are rejected with the offending line number.

use spikelab::config::{ConfigDoc, Entry, Section};
use spikelab::model::ArchSpec;
use spikelab::train::{OptimizerKind, SynthTask, TrainConfig, SYNTH_SIDE, SYNTH_TEST, SYNTH_TRAIN};
use spikelab::{Error, Result};

const SECTIONS: [&str; 5] = ["model", "stage", "train", "data", "energy"];
const PRESET_KEYS: [&str; 7] = ["preset", "timesteps", "seed", "patch_size", "shortcut", "beta", "v_th"];

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub task: SynthTask,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnergyInput {
    Zero,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyConfig {
    pub input: EnergyInput,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ArchSpec,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub energy: EnergyConfig,
}

fn config_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Config { line, msg: msg.into() }
}

pub fn task_name(t: SynthTask) -> &'static str {
    match t {
        SynthTask::Mixed => "mixed",
        SynthTask::LowOnly => "low_only",
    }
}

fn parse_task(s: &str, line: usize) -> Result<SynthTask> {
    match s {
        "mixed" => Ok(SynthTask::Mixed),
        "low_only" => Ok(SynthTask::LowOnly),
        _ => Err(config_err(line, format!("unknown task {s:?} (mixed, low_only)"))),
    }
}

fn line_of(section: &Section, key: &str) -> usize {
    section.entries.iter().find(|e| e.key == key).map_or(section.line, |e| e.line)
}

/// Applies `section.key=value` overrides, creating the section if needed.
pub fn apply_overrides(doc: &mut ConfigDoc, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let bad = || config_err(0, format!("override {o:?} must look like section.key=value"));
        let (path, value) = o.split_once('=').ok_or_else(bad)?;
        let (section, key) = path.trim().split_once('.').ok_or_else(bad)?;
        if section == "stage" {
            return Err(config_err(0, "stage sections cannot be overridden; edit the run file"));
        }
        doc.single(section)?;
        let idx = match doc.sections.iter().position(|s| s.name == section) {
            Some(i) => i,
            None => {
                doc.sections.push(Section::new(section));
                doc.sections.len() - 1
            }
        };
        let s = &mut doc.sections[idx];
        match s.entries.iter_mut().find(|e| e.key == key) {
            Some(e) => e.value = value.trim().to_string(),
            None => s.entries.push(Entry {
                key: key.to_string(),
                value: value.trim().to_string(),
                line: 0,
            }),
        }
    }
    Ok(())
}

fn parse_model(doc: &ConfigDoc) -> Result<ArchSpec> {
    let model = doc
        .single("model")?
        .ok_or_else(|| config_err(0, "missing [model] section"))?;
    if !model.entries.iter().any(|e| e.key == "preset") {
        return ArchSpec::from_doc(doc);
    }
    if let Some(s) = doc.sections_named("stage").next() {
        return Err(config_err(s.line, "[stage] sections cannot be combined with a preset"));
    }
    if let Some(e) = model.entries.iter().find(|e| !PRESET_KEYS.contains(&e.key.as_str())) {
        return Err(config_err(e.line, format!("key {:?} cannot be combined with a preset", e.key)));
    }
    let mut r = model.reader();
    let name: String = r.required("preset")?;
    let mut spec = ArchSpec::preset(&name).map_err(|e| config_err(line_of(model, "preset"), e.to_string()))?;
    spec.timesteps = r.get_or("timesteps", spec.timesteps)?;
    spec.seed = r.get_or("seed", spec.seed)?;
    spec.patch_size = r.get_or("patch_size", spec.patch_size)?;
    spec.shortcut = r.get_or("shortcut", spec.shortcut)?;
    spec.beta = r.get_or("beta", spec.beta)?;
    spec.v_th = r.get_or("v_th", spec.v_th)?;
    r.finish()?;
    spec.validate().map_err(|e| config_err(model.line, e.to_string()))?;
    Ok(spec)
}

fn parse_train(doc: &ConfigDoc) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let Some(s) = doc.single("train")? else {
        return Ok(d);
    };
    let mut r = s.reader();
    let cfg = TrainConfig {
        epochs: r.get_or("epochs", d.epochs)?,
        batch_size: r.get_or("batch_size", d.batch_size)?,
        lr: r.get_or("lr", d.lr)?,
        weight_decay: r.get_or("weight_decay", d.weight_decay)?,
        label_smoothing: r.get_or("label_smoothing", d.label_smoothing)?,
        seed: r.get_or("seed", d.seed)?,
        optimizer: r.get_or::<OptimizerKind>("optimizer", d.optimizer)?,
    };
    r.finish()?;
    cfg.validate().map_err(|e| config_err(s.line, e.to_string()))?;
    Ok(cfg)
}

fn parse_data(doc: &ConfigDoc) -> Result<DataConfig> {
    let mut d = DataConfig {
        task: SynthTask::Mixed,
        n_train: SYNTH_TRAIN,
        n_test: SYNTH_TEST,
        seed: 0,
    };
    let Some(s) = doc.single("data")? else {
        return Ok(d);
    };
    let mut r = s.reader();
    if let Some(t) = r.optional::<String>("task")? {
        d.task = parse_task(&t, line_of(s, "task"))?;
    }
    d.n_train = r.get_or("n_train", d.n_train)?;
    d.n_test = r.get_or("n_test", d.n_test)?;
    d.seed = r.get_or("seed", d.seed)?;
    r.finish()?;
    if d.n_train == 0 || d.n_test == 0 {
        return Err(config_err(s.line, "n_train and n_test must be positive"));
    }
    Ok(d)
}

fn parse_energy(doc: &ConfigDoc) -> Result<EnergyConfig> {
    let mut e = EnergyConfig {
        input: EnergyInput::Synthetic,
        samples: 1,
    };
    let Some(s) = doc.single("energy")? else {
        return Ok(e);
    };
    let mut r = s.reader();
    if let Some(i) = r.optional::<String>("input")? {
        e.input = match i.as_str() {
            "zero" => EnergyInput::Zero,
            "synthetic" => EnergyInput::Synthetic,
            _ => return Err(config_err(line_of(s, "input"), format!("unknown input {i:?} (zero, synthetic)"))),
        };
    }
    e.samples = r.get_or("samples", e.samples)?;
    r.finish()?;
    if e.samples == 0 {
        return Err(config_err(line_of(s, "samples"), "samples must be positive"));
    }
    Ok(e)
}

impl RunConfig {
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc = ConfigDoc::parse(text)?;
        doc.check_sections(&SECTIONS)?;
        apply_overrides(&mut doc, overrides)?;
        doc.check_sections(&SECTIONS)?;
        Ok(RunConfig {
            model: parse_model(&doc)?,
            train: parse_train(&doc)?,
            data: parse_data(&doc)?,
            energy: parse_energy(&doc)?,
        })
    }

    /// Uses one seed for weight init, data generation and shuffling.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.model.seed = seed;
        self.train.seed = seed;
        self.data.seed = seed;
        self
    }

    /// Errors unless the model accepts the synthetic 1×16×16 two-class images.
    pub fn check_synthetic_fit(&self) -> Result<()> {
        let m = &self.model;
        if (m.in_channels, m.height, m.width) != (1, SYNTH_SIDE, SYNTH_SIDE) || m.num_classes < 2 {
            return Err(config_err(
                0,
                format!(
                    "synthetic data is 1x{SYNTH_SIDE}x{SYNTH_SIDE} with 2 classes; model {:?} takes {}x{}x{} with {} classes",
                    m.name, m.in_channels, m.height, m.width, m.num_classes
                ),
            ));
        }
        Ok(())
    }

    /// Fully resolved run file; parses back to an equal config.
    pub fn render(&self) -> String {
        let mut doc = self.model.to_doc();
        let t = &self.train;
        let mut s = Section::new("train");
        s.push("epochs", t.epochs);
        s.push("batch_size", t.batch_size);
        s.push("lr", format!("{:?}", t.lr));
        s.push("weight_decay", format!("{:?}", t.weight_decay));
        s.push("label_smoothing", format!("{:?}", t.label_smoothing));
        s.push("seed", t.seed);
        s.push("optimizer", t.optimizer);
        doc.sections.push(s);
        let mut s = Section::new("data");
        s.push("task", task_name(self.data.task));
        s.push("n_train", self.data.n_train);
        s.push("n_test", self.data.n_test);
        s.push("seed", self.data.seed);
        doc.sections.push(s);
        let mut s = Section::new("energy");
        s.push(
            "input",
            match self.energy.input {
                EnergyInput::Zero => "zero",
                EnergyInput::Synthetic => "synthetic",
            },
        );
        s.push("samples", self.energy.samples);
        doc.sections.push(s);
        doc.render()
    }
}
