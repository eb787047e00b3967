//! `so3mix` command-line tool. Results go to stdout as JSON, logs to stderr.

mod config;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use so3mix::checkpoint::{Checkpoint, Model};
use so3mix::eval::{
    average_ll, classification_nll, prediction_error, sampling_report, throughput_bench, viz_points, write_viz_csv,
    CachedScorer, GridEvaluator, RotationSampler, Workload,
};
use so3mix::grid::{grid_validation_loss, theoretical_max_ll, train_grid_model, RotationGrid};
use so3mix::scorer::HeadKind;
use so3mix::toy::{
    evaluation_set, generate_mode_set, read_mode_set, theoretical_optimal, write_mode_set, write_samples, ToyModeSet,
    ToySample,
};
use so3mix::train::{train, validation_set, Objective, TrainHooks};
use so3mix::{BinPartition, Error, Result};

use config::{Kind, RunConfig};

#[derive(Parser)]
#[command(name = "so3mix", version, about = "Autoregressive rotation densities on the toy benchmark")]
struct Cli {
    /// Worker cap; all computations currently run on one thread.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a mode set and optionally a sample file.
    ToyGen {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write this many stream samples.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long, default_value_t = 0)]
        sample_seed: u64,
        #[arg(long)]
        samples_out: Option<PathBuf>,
    },
    /// Train a model and write a checkpoint plus its training log.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Training log path; defaults to `<out>.log.json`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Average log-likelihood, classification NLL and oracle gap.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        modes: PathBuf,
    },
    /// Draw hierarchical samples and report sampling fidelity.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        modes: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Greedy per-viewpoint predictions and their errors.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        modes: PathBuf,
    },
    /// Throughput of a binned model, and of a grid baseline at M and 2M.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        baseline_checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "8192")]
        grid_sizes: Vec<usize>,
        #[arg(long)]
        modes: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        trials: usize,
    },
    /// CSV of modes, model samples and uniform rotations with log densities.
    ExportViz {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        modes: PathBuf,
        #[arg(long)]
        viewpoint: usize,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(value) => {
            println!("{}", serde_json::to_string_pretty(&value).expect("JSON values serialize"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            log::error!("{e}");
            let body = json!({ "error": { "kind": error_kind(&e), "message": e.to_string() } });
            println!("{body}");
            ExitCode::FAILURE
        }
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::InvalidInput(_) => "invalid-input",
        Error::UnknownViewpoint { .. } => "unknown-viewpoint",
        Error::RejectionCap { .. } => "rejection-cap",
        Error::NonFiniteLoss { .. } => "non-finite-loss",
        Error::StaleCache { .. } => "stale-cache",
        Error::ModeSet(_) => "mode-set",
        Error::Checkpoint(_) => "checkpoint",
        Error::Format(_) => "format",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
    }
}

fn run(cli: Cli) -> Result<Value> {
    if cli.threads == 0 {
        return Err(Error::InvalidInput("--threads must be at least 1".into()));
    }
    match cli.command {
        Command::ToyGen {
            seed,
            out,
            samples,
            sample_seed,
            samples_out,
        } => toy_gen(seed, &out, samples, sample_seed, samples_out.as_deref()),
        Command::Train { config, out, log } => train_cmd(config.as_deref(), &out, log),
        Command::Eval { checkpoint, modes } => eval_cmd(&checkpoint, &modes),
        Command::Sample {
            checkpoint,
            modes,
            n,
            seed,
            out,
        } => sample_cmd(&checkpoint, &modes, n, seed, out.as_deref()),
        Command::Predict { checkpoint, modes } => predict_cmd(&checkpoint, &modes),
        Command::Bench {
            checkpoint,
            baseline_checkpoint,
            grid_sizes,
            modes,
            trials,
        } => bench_cmd(&checkpoint, baseline_checkpoint.as_deref(), grid_sizes, modes.as_deref(), trials),
        Command::ExportViz {
            checkpoint,
            modes,
            viewpoint,
            n,
            seed,
            out,
        } => export_viz_cmd(&checkpoint, &modes, viewpoint, n, seed, &out),
    }
}

fn load_modes(path: &Path) -> Result<ToyModeSet> {
    read_mode_set(BufReader::new(File::open(path)?))
}

fn load(path: &Path) -> Result<(Model, RunConfig)> {
    let c = Checkpoint::load(path)?;
    let run = RunConfig::from_toml(&c.run_config)?;
    Ok((c.model, run))
}

fn toy_gen(seed: u64, out: &Path, samples: Option<usize>, sample_seed: u64, samples_out: Option<&Path>) -> Result<Value> {
    let modes = generate_mode_set(seed)?;
    write_mode_set(BufWriter::new(File::create(out)?), &modes)?;
    let mut result = json!({ "modes": out, "seed": seed, "total_modes": modes.total_modes() });
    if let Some(n) = samples {
        let path = samples_out
            .map(Path::to_path_buf)
            .unwrap_or_else(|| out.with_extension("samples.jsonl"));
        let draws: Vec<ToySample> = modes
            .sample_stream(ChaCha8Rng::seed_from_u64(sample_seed))
            .take(n)
            .collect();
        write_samples(BufWriter::new(File::create(&path)?), &modes, sample_seed, &draws)?;
        result["samples"] = json!(path);
        result["sample_count"] = json!(n);
    }
    Ok(result)
}

fn mode_set_for(run: &RunConfig) -> Result<ToyModeSet> {
    match &run.paths.modes {
        Some(p) => load_modes(p),
        None => generate_mode_set(run.dataset.seed),
    }
}

fn train_cmd(config: Option<&Path>, out: &Path, log_path: Option<PathBuf>) -> Result<Value> {
    let run = RunConfig::load(config)?;
    let modes = mode_set_for(&run)?;
    log::info!("training {:?} on mode set seed {}", run.model.kind, modes.seed());
    let (model, log) = match run.model.kind {
        Kind::Grid => {
            let (m, log) = train_grid_model(run.grid_config(), &modes, &run.training, TrainHooks::default())?;
            (Model::Grid(m), log)
        }
        _ => {
            let (p, log) = train(run.scorer_config(), &modes, &run.training, TrainHooks::default())?;
            (Model::Scorer(p), log)
        }
    };
    let checkpoint = Checkpoint {
        model,
        run_config: run.to_toml()?,
    };
    checkpoint.save(out)?;
    let log_path = log_path.unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".log.json");
        PathBuf::from(p)
    });
    let mut w = BufWriter::new(File::create(&log_path)?);
    serde_json::to_writer_pretty(&mut w, &log)?;
    w.flush()?;
    Ok(json!({
        "checkpoint": out,
        "log": log_path,
        "model_kind": checkpoint.model.kind().as_str(),
        "epochs": log.epochs.len(),
        "best_epoch": log.best_epoch,
        "best_validation_loss": log.best_validation_loss,
        "stop_reason": log.stop_reason,
    }))
}

fn eval_cmd(checkpoint: &Path, modes_path: &Path) -> Result<Value> {
    let (model, run) = load(checkpoint)?;
    let modes = load_modes(modes_path)?;
    let entries = evaluation_set(&modes);
    let partition = BinPartition::new(run.model.bins)?;
    let oracle = theoretical_optimal(&modes, &partition);
    let mut out = json!({
        "model_kind": model.kind().as_str(),
        "oracle_ll": oracle.log_likelihood,
        "oracle_classification_nll": oracle.classification_nll,
        "oracle_bins": run.model.bins,
    });
    let ll = match &model {
        Model::Scorer(p) => {
            let val = p.validation_loss(&validation_set(&modes, &run.training))?;
            out["validation_loss"] = json!(val);
            if p.config().head == HeadKind::Binned {
                out["classification_nll"] = json!(classification_nll(p, &entries)?);
                average_ll(&CachedScorer::new(p)?, &entries)?
            } else {
                average_ll(p, &entries)?
            }
        }
        Model::Grid(g) => {
            out["validation_loss"] = json!(grid_validation_loss(g, &modes, &run.training)?);
            let grid = RotationGrid::new(run.model.grid_size, run.model.grid_seed)?;
            out["grid_size"] = json!(grid.len());
            out["theoretical_max_ll"] = json!(theoretical_max_ll((grid.len() + 1) as f64));
            average_ll(&GridEvaluator::new(g, &grid)?, &entries)?
        }
    };
    out["average_ll"] = json!(finite_or_string(ll.average_ll));
    out["per_viewpoint_ll"] = json!(ll.per_viewpoint.iter().map(|v| finite_or_string(*v)).collect::<Vec<_>>());
    out["non_finite_entries"] = json!(ll.non_finite);
    out["oracle_gap"] = json!(finite_or_string(oracle.log_likelihood - ll.average_ll));
    Ok(out)
}

/// JSON has no infinities; they are written as strings.
fn finite_or_string(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        json!(v.to_string())
    }
}

fn with_sampler<T>(model: &Model, run: &RunConfig, f: impl FnOnce(&dyn RotationSampler) -> Result<T>) -> Result<T> {
    match model {
        Model::Scorer(p) if p.config().head == HeadKind::Binned => f(&CachedScorer::new(p)?),
        Model::Scorer(_) => Err(Error::InvalidInput("MoG models do not support sampling".into())),
        Model::Grid(g) => {
            let grid = RotationGrid::new(run.model.grid_size, run.model.grid_seed)?;
            f(&GridEvaluator::new(g, &grid)?)
        }
    }
}

fn sample_cmd(checkpoint: &Path, modes_path: &Path, n: Option<usize>, seed: Option<u64>, out: Option<&Path>) -> Result<Value> {
    let (model, run) = load(checkpoint)?;
    let modes = load_modes(modes_path)?;
    let n = n.unwrap_or(run.eval.n_samples);
    let seed = seed.unwrap_or(run.eval.seed);
    let partition = BinPartition::new(run.model.bins)?;
    let (report, samples) = with_sampler(&model, &run, |s| {
        let report = sampling_report(s, &modes, &partition, n, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let samples = match out {
            Some(_) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..n)
                    .map(|i| {
                        let viewpoint = i % modes.viewpoints();
                        Ok(ToySample {
                            viewpoint,
                            q: s.sample(viewpoint, &mut rng)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            None => Vec::new(),
        };
        Ok((report, samples))
    })?;
    if let Some(path) = out {
        write_samples(BufWriter::new(File::create(path)?), &modes, seed, &samples)?;
    }
    Ok(json!({ "model_kind": model.kind().as_str(), "seed": seed, "samples_file": out, "report": report }))
}

fn predict_cmd(checkpoint: &Path, modes_path: &Path) -> Result<Value> {
    let (model, run) = load(checkpoint)?;
    let modes = load_modes(modes_path)?;
    let report = match &model {
        Model::Scorer(p) if p.config().head == HeadKind::Binned => prediction_error(&CachedScorer::new(p)?, &modes)?,
        Model::Scorer(_) => return Err(Error::InvalidInput("MoG models do not support prediction".into())),
        Model::Grid(g) => {
            let grid = RotationGrid::new(run.model.grid_size, run.model.grid_seed)?;
            prediction_error(&GridEvaluator::new(g, &grid)?, &modes)?
        }
    };
    Ok(json!({ "model_kind": model.kind().as_str(), "report": report }))
}

fn bench_cmd(
    checkpoint: &Path,
    baseline: Option<&Path>,
    grid_sizes: Vec<usize>,
    modes: Option<&Path>,
    trials: usize,
) -> Result<Value> {
    let (model, _) = load(checkpoint)?;
    let Model::Scorer(params) = model else {
        return Err(Error::InvalidInput("--checkpoint must hold a binned model".into()));
    };
    let grid_model = match baseline {
        Some(p) => match load(p)?.0 {
            Model::Grid(g) => Some(g),
            _ => return Err(Error::InvalidInput("--baseline-checkpoint must hold a grid model".into())),
        },
        None => None,
    };
    let modes = modes.map(load_modes).transpose()?;
    let workload = Workload {
        grid_sizes,
        trials,
        ..Workload::default()
    };
    let record = throughput_bench(&params, grid_model.as_ref(), modes.as_ref(), &workload)?;
    Ok(serde_json::to_value(record)?)
}

fn export_viz_cmd(checkpoint: &Path, modes_path: &Path, viewpoint: usize, n: usize, seed: u64, out: &Path) -> Result<Value> {
    let (model, _) = load(checkpoint)?;
    let modes = load_modes(modes_path)?;
    let Model::Scorer(params) = model else {
        return Err(Error::InvalidInput("export-viz needs a binned model".into()));
    };
    let cached = CachedScorer::new(&params)?;
    let points = viz_points(&cached, &modes, viewpoint, n, &mut ChaCha8Rng::seed_from_u64(seed))?;
    write_viz_csv(BufWriter::new(File::create(out)?), &points)?;
    Ok(json!({ "out": out, "rows": points.len(), "viewpoint": viewpoint }))
}
