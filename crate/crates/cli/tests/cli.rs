use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn spikelab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spikelab"))
        .args(args)
        .env_remove("SPIKELAB_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn rows(csv: &str) -> Vec<(f64, f64)> {
    csv.lines()
        .skip(1)
        .map(|l| {
            let (a, b) = l.split_once(',').unwrap();
            (a.parse().unwrap(), b.parse().unwrap())
        })
        .collect()
}

#[test]
fn filter_examples() {
    let o = spikelab(&["filter", "--beta", "0.25", "--depth", "1"]);
    assert!(o.status.success());
    let r = rows(&stdout(&o));
    assert_eq!(r.len(), 256);
    let (w, h) = *r.last().unwrap();
    assert_eq!(w, std::f64::consts::PI);
    assert!((h - 0.6).abs() < 1e-12, "{h}");

    let r = rows(&stdout(&spikelab(&["filter", "--if"])));
    assert!(r[0].0 > 0.0);
    assert!((r.last().unwrap().1 - 0.5).abs() < 1e-12);

    let r = rows(&stdout(&spikelab(&["filter", "--beta", "0", "--depth", "3"])));
    assert!(r.iter().all(|&(_, h)| h == 1.0));

    let r = rows(&stdout(&spikelab(&["filter", "--beta", "0.5", "--depth", "2", "--gains", "2,3", "--points", "3"])));
    let single = rows(&stdout(&spikelab(&["filter", "--beta", "0.5", "--points", "3"])));
    for (a, b) in r.iter().zip(&single) {
        assert!((a.1 - 6.0 * b.1 * b.1).abs() < 1e-12);
    }
}

#[test]
fn usage_errors_exit_with_two() {
    for args in [
        vec!["filter", "--beta", "1.0"],
        vec!["filter", "--depth", "2", "--gains", "1"],
        vec!["three-sine", "--activation", "tanh"],
        vec!["nonsense"],
        vec!["ablation", "--task", "stripes"],
    ] {
        let o = spikelab(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert!(!o.stderr.is_empty());
    }
}

#[test]
fn filter_rows_round_trip_to_the_same_bits() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("f.csv");
    let o = spikelab(&["filter", "--beta", "0.3", "--depth", "4", "--out", out.to_str().unwrap()]);
    assert!(o.status.success() && o.stdout.is_empty());
    let text = fs::read_to_string(&out).unwrap();
    for (w, h) in rows(&text) {
        assert!(text.contains(&format!("{w},{h}")));
    }
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn three_sine_compare_and_determinism() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    for d in [&a, &b] {
        let o = spikelab(&["three-sine", "--activation", "compare", "--seed", "3", "--out-dir", d.path().to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let s = json(&a.path().join("summary.json"));
    assert!(s["lif_below_relu"].as_u64().unwrap() >= 18);
    assert_eq!(s["seed_count"], 20);
    for name in ["summary.json", "relu/weighted_spectrum.csv", "lif/signals.csv"] {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap(), "{name}");
    }
    let input = fs::read_to_string(a.path().join("relu/input_spectrum.csv")).unwrap();
    let peaks: Vec<(f64, f64)> = rows(&input).into_iter().filter(|&(_, amp)| amp > 1e-6).collect();
    assert_eq!(peaks.len(), 3);
    for (f, amp) in peaks {
        assert!([100.0, 200.0, 300.0].contains(&f) && (amp - 1.0 / 3.0).abs() < 1e-9);
    }
}

#[test]
fn seed_falls_back_to_the_environment() {
    let dir = TempDir::new().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_spikelab"))
        .args(["three-sine", "--activation", "relu", "--out-dir", dir.path().to_str().unwrap()])
        .env("SPIKELAB_SEED", "12")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(json(&dir.path().join("summary.json"))["run"]["seed"], 12);
}

const SMALL_RUN: &str = "\
# two-stage toy on a small sample
[model]
name = toy
in_channels = 1
height = 16
width = 16
timesteps = 2
num_classes = 2

[stage]
embed = orig
mixer = maxpool
blocks = 1
channels = 8

[stage]
embed = max
mixer = dwc-3
blocks = 1
channels = 16

[train]
epochs = 2
batch_size = 16

[data]
n_train = 48
n_test = 16
";

fn write_run(dir: &Path, text: &str) -> String {
    let p = dir.join("run.cfg");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn train_is_deterministic_and_eval_reproduces_it() {
    let work = TempDir::new().unwrap();
    let cfg = write_run(work.path(), SMALL_RUN);
    let outs: Vec<_> = ["a", "b"].iter().map(|n| work.path().join(n)).collect();
    for out in &outs {
        let o = spikelab(&["train", "--config", &cfg, "--seed", "7", "--out-dir", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let metrics = fs::read_to_string(outs[0].join("metrics.csv")).unwrap();
    assert_eq!(metrics, fs::read_to_string(outs[1].join("metrics.csv")).unwrap());
    assert_eq!(fs::read(outs[0].join("params.json")).unwrap(), fs::read(outs[1].join("params.json")).unwrap());
    assert!(metrics.starts_with("epoch,train_loss,train_acc,test_loss,test_acc\n"));

    let last: Vec<f64> = metrics.lines().last().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    let o = spikelab(&["eval", "--dir", outs[0].to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let test: Vec<f64> = text.lines().nth(2).unwrap().split(',').skip(1).map(|v| v.parse().unwrap()).collect();
    let train: Vec<f64> = text.lines().nth(1).unwrap().split(',').skip(1).map(|v| v.parse().unwrap()).collect();
    assert_eq!((train[0], train[1]), (last[2], last[1]));
    assert_eq!((test[0], test[1]), (last[4], last[3]));
}

#[test]
fn config_errors_exit_with_three_and_name_the_line() {
    let work = TempDir::new().unwrap();
    let cfg = write_run(work.path(), &SMALL_RUN.replace("batch_size = 16", "batch_size = 16\nwarmup = 3"));
    let o = spikelab(&["train", "--config", &cfg, "--out-dir", work.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 25"), "{}", String::from_utf8_lossy(&o.stderr));

    let o = spikelab(&["energy", "--config", "/nonexistent/run.cfg"]);
    assert_eq!(o.status.code(), Some(3));

    let o = spikelab(&["train", "--config", &write_run(work.path(), SMALL_RUN), "--set", "train.lr=0"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn divergence_exits_with_four() {
    let work = TempDir::new().unwrap();
    let cfg = write_run(work.path(), SMALL_RUN);
    let out = work.path().join("out");
    let o = spikelab(&[
        "train",
        "--config",
        &cfg,
        "--set",
        "train.lr=1e300",
        "--set",
        "train.optimizer=momentum",
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(String::from_utf8_lossy(&o.stderr).lines().count(), 1);
}

#[test]
fn energy_on_zero_input_charges_only_the_encoder() {
    let work = TempDir::new().unwrap();
    let cfg = write_run(work.path(), "[model]\npreset = tiny\n[energy]\ninput = zero\n");
    let o = spikelab(&["energy", "--config", &cfg, "--out-dir", work.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("stage,"));
    let csv = fs::read_to_string(work.path().join("energy.csv")).unwrap();
    let mut spiking = 0;
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if !f[2].ends_with(":mac") {
            spiking += 1;
            assert_eq!(f[6].parse::<f64>().unwrap(), 0.0, "{line}");
        }
    }
    assert!(spiking > 0);
    let report = json(&work.path().join("energy.json"));
    assert!(report["total_aj"].as_u64().unwrap() > 0);
}

#[test]
fn spectrum_of_a_saved_feature_map() {
    let work = TempDir::new().unwrap();
    let data: Vec<f64> = (0..64).map(|i| ((i % 8) % 2) as f64).collect();
    let input = work.path().join("map.json");
    fs::write(&input, serde_json::json!({"shape": [8, 8], "data": data}).to_string()).unwrap();
    let o = spikelab(&["spectrum", "--input", input.to_str().unwrap(), "--out-dir", work.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("1 bins"));
    let mask = fs::read_to_string(work.path().join("mask.txt")).unwrap();
    assert_eq!(mask.lines().nth(4).unwrap(), "1 0 0 0 0 0 0 0");
    assert!(fs::read_to_string(work.path().join("spectrum.txt")).unwrap().starts_with("shape 8 8\n"));
    assert!(fs::read_to_string(work.path().join("radial.csv")).unwrap().starts_with("radius,"));

    fs::write(&input, "{\"shape\": [2, 2], \"data\": [1.0]}").unwrap();
    assert_ne!(spikelab(&["spectrum", "--input", input.to_str().unwrap()]).status.code(), Some(0));
}

#[test]
fn eval_summarises_an_ablation_directory() {
    let work = TempDir::new().unwrap();
    let csv = "seed,variant,test_acc\n1,avgpool,0.5\n1,maxpool,0.75\n2,avgpool,0.6\n2,maxpool,0.6\n";
    fs::write(work.path().join("ablation.csv"), csv).unwrap();
    let o = spikelab(&["eval", "--dir", work.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("maxpool >= avgpool in 2/2 seeds"), "{}", stdout(&o));

    let empty = TempDir::new().unwrap();
    assert_eq!(spikelab(&["eval", "--dir", empty.path().to_str().unwrap()]).status.code(), Some(2));
}
