use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{error::ErrorKind, Args, Parser, Subcommand};

use wtonp::data::DatasetSpec;
use wtonp::runner::{
    self, emit_reports, evaluate_checkpoint, read_manifest, Checkpoint, ExperimentConfig, Grid, Phase, RunOutcome,
    Scale, FINAL_DIR, MANIFEST,
};
use wtonp::{DType, Result, Scalar};

/// Stochastic magnitude-gated weight pruning experiments.
#[derive(Parser)]
#[command(name = "wtonp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding run.out_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Log the pruned-weight fraction after every minibatch.
    #[arg(long)]
    dense_logging: bool,
    /// Use 200 + 200 epochs where the config leaves epochs unset.
    #[arg(long)]
    paper_scale: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train dense baselines, one per seed.
    Train {
        #[command(flatten)]
        common: Common,
        /// Train this seed only.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the gated session from a baseline checkpoint, or resume an interrupted one.
    Prune {
        #[command(flatten)]
        common: Common,
        /// Baseline (or intermediate prune) checkpoint directory, or a run directory.
        #[arg(long, required_unless_present = "allow_scratch")]
        from: Option<PathBuf>,
        /// Prune a freshly initialized network instead of a trained baseline.
        #[arg(long, conflicts_with = "from")]
        allow_scratch: bool,
        /// Seed for --allow-scratch runs.
        #[arg(long, requires = "allow_scratch")]
        seed: Option<u64>,
    },
    /// Prune runs over a grid of penalties and gate slopes.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Grid file (TOML) with optional `reg`, `lambda`, `a` and `seeds` arrays.
        #[arg(long)]
        grid: PathBuf,
    },
    /// Write summary, connection-map and compensation files for a run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `mnist[:DIR]` or `blobs:classes=..,per_class=..,dim=..,spread=..,seed=..`
        #[arg(long)]
        dataset: String,
        #[arg(long, default_value = "test")]
        split: String,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(out) = &common.out {
        cfg.run.out_dir = out.clone();
    }
    if common.dense_logging {
        cfg.run.dense_logging = true;
    }
    if common.paper_scale {
        cfg.run.scale = Scale::Paper;
    }
    Ok(cfg)
}

fn finish(outcome: &RunOutcome) -> Result<()> {
    emit_reports(&outcome.dir)?;
    let m = outcome.final_metrics();
    let line = serde_json::json!({
        "dir": outcome.dir,
        "seed": outcome.seed,
        "phase": outcome.phase.as_str(),
        "epochs": outcome.epochs,
        "test_error": m.get("test/error_rate"),
        "pruned_weight_frac": m.get("train/pruned_weight_frac"),
        "pruned_node_frac": m.get("train/pruned_node_frac"),
    });
    println!("{line}");
    Ok(())
}

fn train<T: Scalar>(cfg: &ExperimentConfig, seed: Option<u64>) -> Result<()> {
    let splits = runner::load_splits::<T>(cfg)?;
    let seeds = seed.map_or_else(|| cfg.run.seeds.clone(), |s| vec![s]);
    for s in seeds {
        let dir = cfg.run.out_dir.join(format!("baseline-seed{s}"));
        finish(&runner::run_baseline(cfg, s, &splits, &dir)?)?;
    }
    Ok(())
}

/// Accepts a checkpoint directory or a run directory holding `final/`.
fn checkpoint_dir(path: &Path) -> PathBuf {
    if path.join(MANIFEST).is_file() {
        path.to_path_buf()
    } else {
        path.join(FINAL_DIR)
    }
}

fn prune<T: Scalar>(cfg: &ExperimentConfig, from: Option<&Path>, seed: Option<u64>) -> Result<()> {
    cfg.gate()?;
    let splits = runner::load_splits::<T>(cfg)?;
    match from {
        Some(from) => {
            let dir = checkpoint_dir(from);
            let manifest = read_manifest(&dir)?;
            let out = cfg.run.out_dir.join(format!("prune-seed{}", manifest.seed));
            let outcome = match manifest.phase {
                Phase::Baseline => runner::run_prune(cfg, &splits, &Checkpoint::<T>::load(&dir)?, &out)?,
                Phase::Prune => runner::resume(cfg, &splits, &dir, &out)?,
            };
            finish(&outcome)
        }
        None => {
            let seeds = seed.map_or_else(|| cfg.run.seeds.clone(), |s| vec![s]);
            for s in seeds {
                let out = cfg.run.out_dir.join(format!("scratch-prune-seed{s}"));
                finish(&runner::run_prune_from_scratch(cfg, s, &splits, &out)?)?;
            }
            Ok(())
        }
    }
}

fn sweep<T: Scalar>(cfg: &ExperimentConfig, grid: &Path) -> Result<()> {
    let grid = Grid::load(grid)?;
    let summary = runner::run_sweep::<T>(cfg, &grid, &cfg.run.out_dir)?;
    for p in &summary.points {
        for r in &p.runs {
            emit_reports(&r.dir)?;
        }
        let get = |k: &str| p.metrics.get(k).map(|m| (m.mean, m.std));
        let line = serde_json::json!({
            "point": p.label,
            "runs": p.runs.len(),
            "failures": p.failures.len(),
            "test_error": get("test/error_rate"),
            "pruned_weight_frac": get("train/pruned_weight_frac"),
            "pruned_node_frac": get("train/pruned_node_frac"),
        });
        println!("{line}");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    macro_rules! by_dtype {
        ($cfg:expr, $f:ident($($arg:expr),*)) => {
            match $cfg.model.dtype {
                DType::F32 => $f::<f32>($($arg),*),
                DType::F64 => $f::<f64>($($arg),*),
            }
        };
    }
    match cli.command {
        Command::Train { common, seed } => {
            let cfg = load_config(&common)?;
            by_dtype!(cfg, train(&cfg, seed))
        }
        Command::Prune {
            common,
            from,
            allow_scratch: _,
            seed,
        } => {
            let cfg = load_config(&common)?;
            by_dtype!(cfg, prune(&cfg, from.as_deref(), seed))
        }
        Command::Sweep { common, grid } => {
            let cfg = load_config(&common)?;
            by_dtype!(cfg, sweep(&cfg, &grid))
        }
        Command::Report { run } => {
            let files = emit_reports(&run)?;
            println!("{}", files.summary.display());
            Ok(())
        }
        Command::Eval {
            checkpoint,
            dataset,
            split,
        } => {
            let spec = DatasetSpec::parse(&dataset)?;
            let report = evaluate_checkpoint(&checkpoint_dir(&checkpoint), &spec, &split)?;
            println!("{}", serde_json::to_string(&report).expect("report serializes"));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
