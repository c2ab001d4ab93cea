use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Deserialize;
use serde_json::json;
use spikelab::energy::instrument;
use spikelab::freq::{
    curve_to_csv, hf_energy_ratio, high_freq_mask, if_transfer, layered_transfer, lif_transfer, magnitude_response,
    relative_log_amplitude, spectrum2d, three_sine_experiment, three_sine_lif, Activation, ThreeSineRun,
};
use spikelab::model::{build, Network};
use spikelab::train::{
    embed_ablation, evaluate, metrics_csv, pooling_ablation, train, AblationReport, AblationSetup, SynthTask,
    SyntheticFreqDataset,
};
use spikelab::Error;
use spikelab_numcore::Tensor;

use crate::run_config::{EnergyInput, RunConfig};

/// Boundary between the low band (100 Hz) and the high band (200, 300 Hz).
pub const HF_CUTOFF_HZ: f64 = 150.0;
const SINE_RATE_HZ: f64 = 1000.0;
const SINE_SECONDS: f64 = 1.0;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(Error::Config { .. } | Error::Parse(_)) => 3,
            CliError::Core(Error::Divergence(_)) => 4,
            CliError::Core(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn emit(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(p) => write_file(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn load_run(path: &Path, overrides: &[String], seed: Option<u64>) -> CliResult<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config {
        line: 0,
        msg: format!("cannot read {}: {e}", path.display()),
    })?;
    let cfg = RunConfig::parse(&text, overrides)?;
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn load_params(net: &mut Network, path: &Path) -> CliResult<()> {
    let text = fs::read_to_string(path)?;
    net.store_mut().load_json(&text)?;
    Ok(())
}

pub struct FilterArgs {
    pub beta: f64,
    pub depth: usize,
    pub gains: Option<Vec<f64>>,
    pub integrate_and_fire: bool,
    pub points: usize,
}

/// `omega,magnitude` rows on a uniform grid over [0, π]; the IF pole at 0 is skipped.
pub fn filter_table(a: &FilterArgs) -> CliResult<String> {
    if a.points < 2 {
        return usage("--points must be at least 2");
    }
    if a.depth == 0 {
        return usage("--depth must be at least 1");
    }
    let base = if a.integrate_and_fire {
        if_transfer()
    } else {
        if !(0.0..1.0).contains(&a.beta) {
            return usage(format!("--beta must lie in [0, 1) (got {}); pass --if for the integrator", a.beta));
        }
        lif_transfer(a.beta)?
    };
    let gains = a.gains.clone().unwrap_or_else(|| vec![1.0; a.depth]);
    if gains.len() != a.depth {
        return usage(format!("--gains has {} values for depth {}", gains.len(), a.depth));
    }
    let tf = layered_transfer(&base, a.depth, &gains)?;
    let mut out = String::from("omega,magnitude\n");
    let first = usize::from(a.integrate_and_fire);
    for i in first..a.points {
        let w = std::f64::consts::PI * i as f64 / (a.points - 1) as f64;
        let _ = writeln!(out, "{w},{}", magnitude_response(&tf, w)?);
    }
    Ok(out)
}

pub fn cmd_filter(a: &FilterArgs, out: Option<&Path>) -> CliResult<()> {
    emit(out, &filter_table(a)?)
}

fn signals_csv(run: &ThreeSineRun) -> String {
    let mut s = String::from("t,input,activated,weighted\n");
    for i in 0..run.time.len() {
        let _ = writeln!(s, "{},{},{},{}", run.time[i], run.input[i], run.activated[i], run.weighted[i]);
    }
    s
}

fn sine_run(activation: Activation, seed: u64, dir: &Path) -> CliResult<serde_json::Value> {
    let run = three_sine_experiment(activation, seed, SINE_RATE_HZ, SINE_SECONDS)?;
    write_file(&dir.join("signals.csv"), &signals_csv(&run))?;
    write_file(&dir.join("input_spectrum.csv"), &run.input_spectrum.to_csv())?;
    write_file(&dir.join("activated_spectrum.csv"), &run.activated_spectrum.to_csv())?;
    write_file(&dir.join("weighted_spectrum.csv"), &run.weighted_spectrum.to_csv())?;
    Ok(json!({
        "seed": seed,
        "input_hf_ratio": hf_energy_ratio(&run.input_spectrum, HF_CUTOFF_HZ)?,
        "activated_hf_ratio": hf_energy_ratio(&run.activated_spectrum, HF_CUTOFF_HZ)?,
        "weighted_hf_ratio": hf_energy_ratio(&run.weighted_spectrum, HF_CUTOFF_HZ)?,
    }))
}

fn weighted_ratio(activation: Activation, seed: u64) -> CliResult<f64> {
    let run = three_sine_experiment(activation, seed, SINE_RATE_HZ, SINE_SECONDS)?;
    Ok(hf_energy_ratio(&run.weighted_spectrum, HF_CUTOFF_HZ)?)
}

/// `relu`, `lif`, or `compare` (both, plus a per-seed ratio comparison).
pub fn cmd_three_sine(activation: &str, seed: u64, seeds: usize, dir: &Path) -> CliResult<String> {
    let lif = Activation::Lif(three_sine_lif());
    let summary = match activation {
        "relu" => json!({"activation": "relu", "cutoff_hz": HF_CUTOFF_HZ, "run": sine_run(Activation::Relu, seed, dir)?}),
        "lif" => json!({"activation": "lif", "cutoff_hz": HF_CUTOFF_HZ, "run": sine_run(lif, seed, dir)?}),
        "compare" => {
            if seeds == 0 {
                return usage("--seeds must be at least 1");
            }
            let relu_run = sine_run(Activation::Relu, seed, &dir.join("relu"))?;
            let lif_run = sine_run(lif, seed, &dir.join("lif"))?;
            let mut rows = Vec::with_capacity(seeds);
            let mut wins = 0;
            for s in seed..seed + seeds as u64 {
                let (r, l) = (weighted_ratio(Activation::Relu, s)?, weighted_ratio(lif, s)?);
                wins += usize::from(l < r);
                rows.push(json!({"seed": s, "relu_hf_ratio": r, "lif_hf_ratio": l}));
            }
            json!({
                "activation": "compare",
                "cutoff_hz": HF_CUTOFF_HZ,
                "relu": relu_run,
                "lif": lif_run,
                "seeds": rows,
                "lif_below_relu": wins,
                "seed_count": seeds,
            })
        }
        other => return usage(format!("unknown activation {other:?} (relu, lif, compare)")),
    };
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Parse(e.to_string()))? + "\n";
    write_file(&dir.join("summary.json"), &text)?;
    Ok(text)
}

fn datasets(cfg: &RunConfig) -> CliResult<SyntheticFreqDataset> {
    cfg.check_synthetic_fit()?;
    let d = &cfg.data;
    Ok(SyntheticFreqDataset::generate_sized(d.seed, d.task, d.n_train, d.n_test)?)
}

/// Writes `metrics.csv`, `params.json` and the resolved `run.cfg`.
pub fn cmd_train(cfg: &RunConfig, dir: &Path) -> CliResult<String> {
    let data = datasets(cfg)?;
    let mut net = build(&cfg.model)?;
    let history = train(&mut net, &data.train, &data.test, &cfg.train)?;
    write_file(&dir.join("run.cfg"), &cfg.render())?;
    write_file(&dir.join("metrics.csv"), &metrics_csv(&history))?;
    write_file(&dir.join("params.json"), &net.store().to_json()?)?;
    Ok(match history.last() {
        Some(m) => format!(
            "epoch {}: train_acc {:.4} test_acc {:.4} test_loss {:.4}\n",
            m.epoch, m.train_acc, m.test_acc, m.test_loss
        ),
        None => "no epochs run\n".to_string(),
    })
}

/// Summarises an ablation directory or evaluates a trained run directory.
pub fn cmd_eval(dir: &Path) -> CliResult<String> {
    let ablation = dir.join("ablation.csv");
    if ablation.exists() {
        return Ok(AblationReport::from_csv(&fs::read_to_string(ablation)?)?.summary());
    }
    let (run, params) = (dir.join("run.cfg"), dir.join("params.json"));
    if !run.exists() || !params.exists() {
        return usage(format!(
            "{} holds neither ablation.csv nor run.cfg + params.json",
            dir.display()
        ));
    }
    let cfg = load_run(&run, &[], None)?;
    let data = datasets(&cfg)?;
    let mut net = build(&cfg.model)?;
    load_params(&mut net, &params)?;
    let (train_acc, train_loss) = evaluate(&net, &data.train)?;
    let (test_acc, test_loss) = evaluate(&net, &data.test)?;
    let text = format!("split,accuracy,loss\ntrain,{train_acc},{train_loss}\ntest,{test_acc},{test_loss}\n");
    write_file(&dir.join("eval.csv"), &text)?;
    Ok(text)
}

/// Writes `energy.csv` and `energy.json`; returns the stage summary table.
pub fn cmd_energy(cfg: &RunConfig, params: Option<&Path>, dir: &Path) -> CliResult<String> {
    let mut net = build(&cfg.model)?;
    if let Some(p) = params {
        load_params(&mut net, p)?;
    }
    let m = &cfg.model;
    let n = cfg.energy.samples;
    let input = match cfg.energy.input {
        EnergyInput::Zero => Tensor::zeros(&[n, m.in_channels, m.height, m.width]),
        EnergyInput::Synthetic => {
            cfg.check_synthetic_fit()?;
            let d = SyntheticFreqDataset::generate_sized(cfg.data.seed, cfg.data.task, n, 1)?;
            d.train.images().clone()
        }
    };
    let report = instrument(&net, &input)?;
    write_file(&dir.join("energy.csv"), &report.to_csv())?;
    write_file(&dir.join("energy.json"), &(report.to_json()? + "\n"))?;
    let mut text = report.summary_table();
    for note in &report.notes {
        let _ = writeln!(text, "note: {note}");
    }
    Ok(text)
}

#[derive(Deserialize)]
struct FeatureFile {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Reads `{"shape": [C, H, W] | [H, W], "data": [...]}`.
pub fn read_feature_map(path: &Path) -> CliResult<Tensor> {
    let f: FeatureFile = serde_json::from_str(&fs::read_to_string(path)?)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let shape = match f.shape.as_slice() {
        [h, w] => vec![1, *h, *w],
        [c, h, w] => vec![*c, *h, *w],
        s => return usage(format!("feature map must be [C, H, W] or [H, W], got {s:?}")),
    };
    Ok(Tensor::new(&shape, f.data).map_err(Error::from)?)
}

/// Writes `spectrum.txt`, `radial.csv` and `mask.txt`; returns a short summary.
pub fn cmd_spectrum(input: &Path, threshold: f64, dir: &Path) -> CliResult<String> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return usage(format!("--threshold must lie in (0, 1), got {threshold}"));
    }
    let s = spectrum2d(&read_feature_map(input)?)?;
    let mask = high_freq_mask(&s, threshold)?;
    write_file(&dir.join("spectrum.txt"), &s.to_text())?;
    let curve = relative_log_amplitude(&s)?;
    write_file(&dir.join("radial.csv"), &curve_to_csv(&curve))?;
    let mut m = String::new();
    for row in mask.chunks(s.width) {
        let cells: Vec<&str> = row.iter().map(|&b| if b { "1" } else { "0" }).collect();
        let _ = writeln!(m, "{}", cells.join(" "));
    }
    write_file(&dir.join("mask.txt"), &m)?;
    let flagged = mask.iter().filter(|&&b| b).count();
    Ok(format!(
        "{}x{} spectrum, DC {}, {flagged} bins above {threshold} of the peak outside DC\n",
        s.height,
        s.width,
        s.dc()
    ))
}

pub struct AblationArgs {
    pub kind: String,
    pub seeds: Vec<u64>,
    pub timesteps: usize,
    pub epochs: Option<usize>,
    pub task: SynthTask,
}

/// Writes `ablation.csv` and `summary.txt`; returns the summary.
pub fn cmd_ablation(a: &AblationArgs, dir: &Path) -> CliResult<String> {
    if a.timesteps == 0 {
        return usage("--timesteps must be at least 1");
    }
    let mut setup = AblationSetup::toy(a.timesteps);
    setup.task = a.task;
    if let Some(e) = a.epochs {
        setup.train.epochs = e;
    }
    let report = match a.kind.as_str() {
        "pooling" => pooling_ablation(&a.seeds, &setup)?,
        "embed" => embed_ablation(&a.seeds, &setup)?,
        other => return usage(format!("unknown ablation {other:?} (pooling, embed)")),
    };
    let summary = report.summary();
    write_file(&dir.join("ablation.csv"), &report.to_csv())?;
    write_file(&dir.join("summary.txt"), &summary)?;
    Ok(summary)
}
