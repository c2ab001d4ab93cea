mod commands;
mod run_config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use spikelab::train::SynthTask;

use commands::{
    cmd_ablation, cmd_energy, cmd_eval, cmd_filter, cmd_spectrum, cmd_three_sine, cmd_train, load_run, AblationArgs,
    CliError, CliResult, FilterArgs,
};

#[derive(Parser)]
#[command(name = "spikelab", version, about = "Spiking transformer laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Magnitude response of a LIF (or IF) low-pass chain as `omega,magnitude` CSV.
    Filter {
        #[arg(long, default_value_t = 0.25)]
        beta: f64,
        #[arg(long, default_value_t = 1)]
        depth: usize,
        /// Per-layer gains, comma separated; defaults to all ones.
        #[arg(long, value_delimiter = ',')]
        gains: Option<Vec<f64>>,
        /// Use the integrate-and-fire neuron instead of LIF.
        #[arg(long = "if")]
        integrate_and_fire: bool,
        #[arg(long, default_value_t = 256)]
        points: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Three-sine activation experiment: spectra before and after ReLU or LIF and a random FIR.
    ThreeSine {
        /// relu, lif, or compare.
        #[arg(long, default_value = "compare")]
        activation: String,
        #[arg(long, env = "SPIKELAB_SEED", default_value_t = 0)]
        seed: u64,
        /// Number of FIR seeds scored in compare mode.
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Trains a network on the synthetic frequency task.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Seeds weight init, data and shuffling together.
        #[arg(long, env = "SPIKELAB_SEED")]
        seed: Option<u64>,
        /// `section.key=value` override; repeatable.
        #[arg(long = "set")]
        overrides: Vec<String>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Evaluates a train output directory or summarises an ablation directory.
    Eval {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Per-layer energy report for one forward pass.
    Energy {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, env = "SPIKELAB_SEED")]
        seed: Option<u64>,
        #[arg(long = "set")]
        overrides: Vec<String>,
        /// Trained parameters (`params.json` from `train`).
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// 2-D amplitude spectrum of a saved feature map (JSON with `shape` and `data`).
    Spectrum {
        #[arg(long)]
        input: PathBuf,
        /// High-frequency mask threshold as a fraction of the peak non-DC amplitude.
        #[arg(long, default_value_t = 0.55)]
        threshold: f64,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Matched toy-network ablation over several seeds.
    Ablation {
        /// pooling (avg vs max token mixing) or embed (orig vs max patch embedding).
        #[arg(long, default_value = "pooling")]
        kind: String,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 4)]
        timesteps: usize,
        #[arg(long)]
        epochs: Option<usize>,
        /// mixed or low_only.
        #[arg(long, default_value = "mixed")]
        task: String,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    let text = match cli.command {
        Command::Filter {
            beta,
            depth,
            gains,
            integrate_and_fire,
            points,
            out,
        } => {
            let args = FilterArgs {
                beta,
                depth,
                gains,
                integrate_and_fire,
                points,
            };
            return cmd_filter(&args, out.as_deref());
        }
        Command::ThreeSine {
            activation,
            seed,
            seeds,
            out_dir,
        } => cmd_three_sine(&activation, seed, seeds, &out_dir)?,
        Command::Train {
            config,
            seed,
            overrides,
            out_dir,
        } => cmd_train(&load_run(&config, &overrides, seed)?, &out_dir)?,
        Command::Eval { dir } => cmd_eval(&dir)?,
        Command::Energy {
            config,
            seed,
            overrides,
            params,
            out_dir,
        } => cmd_energy(&load_run(&config, &overrides, seed)?, params.as_deref(), &out_dir)?,
        Command::Spectrum {
            input,
            threshold,
            out_dir,
        } => cmd_spectrum(&input, threshold, &out_dir)?,
        Command::Ablation {
            kind,
            seeds,
            timesteps,
            epochs,
            task,
            out_dir,
        } => {
            let task = match task.as_str() {
                "mixed" => SynthTask::Mixed,
                "low_only" => SynthTask::LowOnly,
                other => return Err(CliError::Usage(format!("unknown task {other:?} (mixed, low_only)"))),
            };
            let args = AblationArgs {
                kind,
                seeds,
                timesteps,
                epochs,
                task,
            };
            cmd_ablation(&args, &out_dir)?
        }
    };
    print!("{text}");
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("spikelab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
