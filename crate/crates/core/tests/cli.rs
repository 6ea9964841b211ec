//! End-to-end runs of the `wtonp` binary on a tiny synthetic problem.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn wtonp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wtonp"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn config(dir: &Path, lr: f64) -> std::path::PathBuf {
    let text = format!(
        r#"
[model]
architecture = "custom"
dtype = "f64"
input_shape = [4]
layers = [
  {{ type = "dense", id = "h", units = 8 }},
  {{ type = "relu" }},
  {{ type = "dense", id = "out", units = 3 }},
  {{ type = "softmax_cross_entropy" }},
]

[data]
kind = "blobs"
classes = 3
per_class = 30
dim = 4
spread = 0.3
seed = 2

[optim]
kind = "sgd"
learning_rate = {lr:e}

[baseline]
epochs = 2

[prune]
epochs = 3
reg = {{ kind = "l2", lambda = 1e-3 }}
gate = {{ a = 20.0 }}

[run]
seeds = [4]
batch_size = 16
out_dir = "{}"
"#,
        dir.join("runs").display()
    );
    let path = dir.join(format!("cfg-{lr:e}.toml"));
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn train_prune_report_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), 0.05);
    let cfg = cfg.to_str().unwrap();

    let out = wtonp(&["train", "--config", cfg]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let line: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(line["phase"], "baseline");
    let baseline = tmp.path().join("runs/baseline-seed4");
    assert!(baseline.join("final/manifest.json").is_file());

    let out = wtonp(&["prune", "--config", cfg, "--from", baseline.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let run = tmp.path().join("runs/prune-seed4");
    for f in ["metrics.csv", "node_stats.csv", "summary.json", "connection_map_h.csv", "compensation_out.csv"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }

    let out = wtonp(&["report", "--run", run.to_str().unwrap()]);
    assert_eq!(code(&out), 0);

    let dataset = "blobs:classes=3,per_class=30,dim=4,spread=0.3,seed=2";
    let out = wtonp(&["eval", "--checkpoint", run.to_str().unwrap(), "--dataset", dataset]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["split"], "test");
    assert!(report["error_rate"].as_f64().unwrap() <= 1.0);
}

#[test]
fn sweep_writes_one_directory_per_point() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), 0.05);
    let grid = tmp.path().join("grid.toml");
    fs::write(&grid, "lambda = [1e-3, 1e-2]\na = [10.0]\n").unwrap();
    let out = wtonp(&["sweep", "--config", cfg.to_str().unwrap(), "--grid", grid.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 2);
    let runs = tmp.path().join("runs");
    assert!(runs.join("l2-lambda0.001-a10/seed4/summary.json").is_file());
    assert!(runs.join("l2-lambda0.01-a10/seed4/summary.json").is_file());
    assert!(runs.join("summary.json").is_file());
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&wtonp(&["--help"])), 0);
    assert_eq!(code(&wtonp(&["frobnicate"])), 1);

    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[model]\narchitecture = \"mlp-300-100\"\nbogus = 1\n").unwrap();
    assert_eq!(code(&wtonp(&["train", "--config", bad.to_str().unwrap()])), 1);

    let missing = tmp.path().join("nope.toml");
    assert_eq!(code(&wtonp(&["train", "--config", missing.to_str().unwrap()])), 3);

    let empty = tmp.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let out = wtonp(&["report", "--run", empty.to_str().unwrap()]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("metrics.csv"));

    let cfg = config(tmp.path(), 1e300);
    let text = fs::read_to_string(&cfg).unwrap().replace(r#"kind = "l2", lambda = 1e-3"#, r#"kind = "none""#);
    fs::write(&cfg, text).unwrap();
    let out = wtonp(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));

    let cfg = config(tmp.path(), 0.05);
    let out = wtonp(&["prune", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(&dir).expect("configs directory") {
        let path = entry.expect("dir entry").path();
        if path.file_name().is_some_and(|n| n.to_string_lossy().contains("grid")) {
            wtonp::runner::Grid::load(&path).expect("grid parses");
        } else {
            let cfg = wtonp::runner::ExperimentConfig::load(&path).expect("config parses");
            cfg.gate().expect("prune gate set");
        }
        seen += 1;
    }
    assert!(seen >= 4);
}
