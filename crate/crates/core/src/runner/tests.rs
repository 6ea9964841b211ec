use super::*;
use crate::optim::RegKind;

fn tiny_config(dir: &Path) -> ExperimentConfig {
    let text = format!(
        r#"
[model]
architecture = "custom"
dtype = "f64"
input_shape = [4]
layers = [
  {{ type = "dense", id = "h", units = 16 }},
  {{ type = "relu" }},
  {{ type = "dense", id = "out", units = 3 }},
  {{ type = "softmax_cross_entropy" }},
]

[data]
kind = "blobs"
classes = 3
per_class = 40
dim = 4
spread = 0.3
seed = 5
test_per_class = 20

[optim]
learning_rate = 0.01

[baseline]
epochs = 4
reg = {{ kind = "l2", lambda = 1e-3 }}

[prune]
epochs = 6
reg = {{ kind = "l2", lambda = 1e-3 }}
gate = {{ a = 20.0 }}

[run]
seeds = [3]
batch_size = 16
out_dir = "{}"
checkpoint_every = 2
"#,
        dir.display()
    );
    ExperimentConfig::from_toml(&text).unwrap()
}

fn baseline_and_prune(cfg: &ExperimentConfig, out: &Path) -> (RunOutcome, RunOutcome) {
    let splits = load_splits::<f64>(cfg).unwrap();
    let b = run_baseline(cfg, 3, &splits, &out.join("b")).unwrap();
    let ck = Checkpoint::<f64>::load(&b.final_checkpoint_dir()).unwrap();
    let p = run_prune(cfg, &splits, &ck, &out.join("p")).unwrap();
    (b, p)
}

#[test]
fn mlp_on_separable_blobs_trains_below_two_percent() {
    let text = r#"
[data]
kind = "blobs"
classes = 3
per_class = 60
dim = 784
spread = 1.0
seed = 2

[baseline]
epochs = 20
"#;
    let cfg = ExperimentConfig::from_toml(text).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let splits = load_splits::<f32>(&cfg).unwrap();
    let out = run_baseline(&cfg, 1, &splits, dir.path()).unwrap();
    assert!(out.metric("train/error_rate").unwrap() < 0.02);
    assert_eq!(out.last_epoch(), 20);
}

#[test]
fn zero_epoch_baseline_is_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.baseline.epochs = Some(0);
    let splits = load_splits::<f64>(&cfg).unwrap();
    let out = run_baseline(&cfg, 3, &splits, dir.path()).unwrap();
    let ck = Checkpoint::<f64>::load(&out.final_checkpoint_dir()).unwrap();
    let mut init = cfg.model.build::<f64>().unwrap();
    init.init_weights(derive_seed(3, "init"));
    assert_eq!(ck.net, init);
    assert_eq!(out.last_epoch(), 0);
}

#[test]
fn runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (_, a) = baseline_and_prune(&cfg, &dir.path().join("1"));
    let (_, b) = baseline_and_prune(&cfg, &dir.path().join("2"));
    for f in [METRICS_FILE, NODE_STATS_FILE, "final/manifest.json", "final/weights.bin"] {
        assert_eq!(fs::read(a.dir.join(f)).unwrap(), fs::read(b.dir.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.run.dense_logging = true;
    let (b, full) = baseline_and_prune(&cfg, dir.path());
    let splits = load_splits::<f64>(&cfg).unwrap();
    let resumed = resume(&cfg, &splits, &full.dir.join("checkpoints/epoch-0004"), &dir.path().join("r")).unwrap();
    assert_eq!(resumed.rows, full.rows);
    for f in [METRICS_FILE, NODE_STATS_FILE, STEPS_FILE, "final/manifest.json", "final/weights.bin"] {
        assert_eq!(fs::read(full.dir.join(f)).unwrap(), fs::read(resumed.dir.join(f)).unwrap(), "{f}");
    }
    let base_resumed = resume(&cfg, &splits, &b.dir.join("checkpoints/epoch-0002"), &dir.path().join("rb")).unwrap();
    assert_eq!(base_resumed.rows, b.rows);
}

#[test]
fn resume_rejects_foreign_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (_, full) = baseline_and_prune(&cfg, dir.path());
    let mut other = cfg.clone();
    other.prune.gate = Some(GateSpec::sigmoid(3.0));
    let splits = load_splits::<f64>(&cfg).unwrap();
    let err = resume(&other, &splits, &full.dir.join("checkpoints/epoch-0002"), &dir.path().join("x")).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn keep_all_gate_without_penalty_tracks_plain_training() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.baseline.reg = RegConfig::default();
    cfg.prune.reg = RegConfig::default();
    cfg.prune.gate = Some(GateSpec::keep_all());
    let (b, p) = baseline_and_prune(&cfg, dir.path());
    assert_eq!(p.metric("train/pruned_weight_frac"), Some(0.0));
    let mut longer = cfg.clone();
    longer.baseline.epochs = Some(cfg.baseline_epochs() + cfg.prune_epochs());
    let splits = load_splits::<f64>(&cfg).unwrap();
    let plain = run_baseline(&longer, 3, &splits, &dir.path().join("plain")).unwrap();
    let (pe, ce) = (p.metric("test/error_rate").unwrap(), plain.metric("test/error_rate").unwrap());
    assert!((pe - ce).abs() <= 0.05, "{pe} vs {ce}");
    assert!(b.metric("test/error_rate").is_some());
}

#[test]
fn prune_requires_gate_and_matching_architecture() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let splits = load_splits::<f64>(&cfg).unwrap();
    let b = run_baseline(&cfg, 3, &splits, &dir.path().join("b")).unwrap();
    let ck = Checkpoint::<f64>::load(&b.final_checkpoint_dir()).unwrap();
    let mut no_gate = cfg.clone();
    no_gate.prune.gate = None;
    assert!(matches!(run_prune(&no_gate, &splits, &ck, &dir.path().join("p")), Err(Error::Config(_))));
    let mut wider = cfg.clone();
    wider.model.layers.as_mut().unwrap()[0] = crate::nn::LayerSpec::Dense { id: "h".into(), units: 8 };
    assert!(run_prune(&wider, &splits, &ck, &dir.path().join("q")).is_err());
}

#[test]
fn reports_from_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    match emit_reports(&empty).unwrap_err() {
        Error::MissingInputs { missing, .. } => {
            assert_eq!(missing.len(), 4);
            assert!(missing.iter().any(|m| m == METRICS_FILE));
        }
        other => panic!("unexpected {other}"),
    }

    let cfg = tiny_config(dir.path());
    let (_, p) = baseline_and_prune(&cfg, dir.path());
    let files = emit_reports(&p.dir).unwrap();
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(&files.summary).unwrap()).unwrap();
    let ck = Checkpoint::<f64>::load(&p.final_checkpoint_dir()).unwrap();
    assert_eq!(
        summary["final"]["train/pruned_weight_frac"].as_f64().unwrap(),
        pruned_weight_fraction(&ck.net)
    );
    assert_eq!(
        summary["final"]["train/pruned_weight_frac"],
        summary["recomputed"]["train/pruned_weight_frac"]
    );
    assert_eq!(files.connection_maps.len(), 2);
    for c in &files.compensation {
        let rows = fs::read_to_string(c).unwrap().lines().count() - 1;
        assert_eq!(rows, cfg.prune_epochs() * 2);
    }
}

#[test]
fn sweep_points_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let one = Grid::default();
    let s = run_sweep::<f64>(&cfg, &one, &dir.path().join("s1")).unwrap();
    assert_eq!(s.points.len(), 1);
    let (_, single) = baseline_and_prune(&cfg, &dir.path().join("single"));
    assert_eq!(s.points[0].per_seed[0], single.final_metrics());

    let grid = Grid {
        reg: Some(vec![RegKind::L2, RegKind::None]),
        lambda: Some(vec![1e-3, 1e4]),
        a: None,
        seeds: Some(vec![3, 3]),
    };
    let s = run_sweep::<f64>(&cfg, &grid, &dir.path().join("s2")).unwrap();
    assert_eq!(s.points.len(), 3);
    let ok = s.point("l2-lambda0.001-a20").unwrap();
    assert_eq!(ok.runs.len(), 2);
    assert!(ok.metrics.values().all(|m| m.std == 0.0 && m.n == 2));
    // λ·lr ≥ 1 fails validation; the sweep records it and moves on
    let bad = s.point("l2-lambda10000-a20").unwrap();
    assert_eq!(bad.failures.len(), 2);
    assert!(s.point("none-a20").unwrap().failures.is_empty());
    assert!(dir.path().join("s2/summary.json").is_file());
}

#[test]
fn metric_series_and_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (_, p) = baseline_and_prune(&cfg, dir.path());
    let s = p.series("train/pruned_weight_frac");
    assert_eq!(s.len(), cfg.prune_epochs() + 1);
    assert_eq!(s[0].0, 0);
    assert!(p.metric("train/input/pruned_node_frac").is_some());
    assert!(p.metric("test/error_rate").is_some());
}

#[test]
fn dense_logging_records_every_step() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(tmp.path());
    cfg.run.dense_logging = true;
    let (_, p) = baseline_and_prune(&cfg, tmp.path());
    let steps = read_steps(&p.dir.join(STEPS_FILE)).unwrap();
    // 120 training samples in batches of 16, six epochs
    assert_eq!(steps.len(), 6 * 8);
    let last = steps.last().unwrap();
    assert_eq!(last.epoch, 6);
    assert_eq!(Some(last.pruned_weight_frac), p.metric("train/pruned_weight_frac"));
    assert_eq!(Some(last.pruned_node_frac), p.metric("train/pruned_node_frac"));
}

#[test]
fn ensure_prune_reuses_only_matching_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let splits = load_splits::<f64>(&cfg).unwrap();
    let b = run_baseline(&cfg, 3, &splits, &tmp.path().join("b")).unwrap();
    let ck = Checkpoint::<f64>::load(&b.final_checkpoint_dir()).unwrap();
    let dir = tmp.path().join("p");
    let first = ensure_prune(&cfg, &splits, &ck, &dir).unwrap();
    let metrics = dir.join(METRICS_FILE);
    fs::write(&metrics, fs::read_to_string(&metrics).unwrap()).unwrap();
    let stamp = fs::metadata(&metrics).unwrap().modified().unwrap();

    let mut moved = cfg.clone();
    moved.run.out_dir = tmp.path().join("elsewhere");
    let again = ensure_prune(&moved, &splits, &ck, &dir).unwrap();
    assert_eq!(again.rows, first.rows);
    assert_eq!(fs::metadata(&metrics).unwrap().modified().unwrap(), stamp);

    let mut other = cfg.clone();
    other.prune.gate = Some(GateSpec::sigmoid(5.0));
    let rerun = ensure_prune(&other, &splits, &ck, &dir).unwrap();
    assert_ne!(rerun.rows, first.rows);
}
