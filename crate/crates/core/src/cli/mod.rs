//! The `frameflow` command line.
//!
//! Exit codes: 0 success, 1 I/O or other failure, 2 configuration or usage
//! error, 3 numeric abort (non-finite values, divergence, stiff or
//! over-budget integration).

pub mod config;

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::baseline::{isoae_tangent_error, train_isoae, IsoAeConfig, IsoAeLoss};
use crate::datasets::make_dataset;
use crate::error::{Error, Result};
use crate::eval::{
    angular_error, dataset_for, dimension_detect, evaluate, sensitivity_sweep, write_dimension_csv,
    write_sweep_csv, Coefficient,
};
use crate::models::checkpoint;
use crate::trainer::{
    thread_count, write_history_csv, CheckpointPolicy, LrSchedule, OptimizerConfig, Trainer,
};

pub use config::{RunConfig, KEYS};

pub const CHECKPOINT_FILE: &str = "checkpoint.txt";
pub const LOSS_FILE: &str = "loss.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const DIMENSION_FILE: &str = "dimension.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const BASELINE_LOSS_FILE: &str = "baseline_loss.csv";

#[derive(Parser, Debug)]
#[command(
    name = "frameflow",
    about = "Learn tangent frames of sampled manifolds"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train one model; writes a checkpoint, the loss CSV, a manifest and a summary.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a regenerated dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: String,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        test_points: usize,
        #[arg(long, default_value_t = 200)]
        eval_points: usize,
    },
    /// Train one model per field count and report the smallest with vanishing frame loss.
    Dimdetect {
        #[arg(long)]
        config: PathBuf,
        /// Inclusive range `lo..hi` or a comma-separated list.
        #[arg(long, default_value = "1..4")]
        m_range: String,
        #[arg(long, default_value = "dimdetect")]
        out: PathBuf,
    },
    /// Retrain for each value of one loss coefficient and record the angular error.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// alpha | beta | zeta | eta
        #[arg(long)]
        coefficient: String,
        /// Comma-separated values.
        #[arg(long)]
        values: String,
        #[arg(long, default_value = "sweep")]
        out: PathBuf,
    },
    /// Train the isometric autoencoder baseline and report its tangent error.
    Baseline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "baseline")]
        out: PathBuf,
    },
    /// Print every configuration key with its default.
    Keys,
}

/// The summary written next to every report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub dataset: String,
    pub m: usize,
    pub seed: u64,
    pub angular_mean_deg: Option<f64>,
    pub angular_std_deg: Option<f64>,
    pub final_loss: Option<f64>,
    pub detected_m: Option<usize>,
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } | Error::Domain { .. } | Error::Dimension(_) => 2,
        Error::Numeric { .. }
        | Error::Divergence { .. }
        | Error::Stiffness { .. }
        | Error::StepBudget { .. }
        | Error::NoConvergence { .. } => 3,
        _ => 1,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Train { config, out } => cmd_train(&config, &out),
        Command::Eval {
            checkpoint,
            dataset,
            report,
            seed,
            test_points,
            eval_points,
        } => cmd_eval(
            &checkpoint,
            &dataset,
            &report,
            seed,
            test_points,
            eval_points,
        ),
        Command::Dimdetect {
            config,
            m_range,
            out,
        } => cmd_dimdetect(&config, &parse_m_range(&m_range)?, &out),
        Command::Sweep {
            config,
            coefficient,
            values,
            out,
        } => {
            let coefficient = Coefficient::parse(&coefficient).ok_or_else(|| {
                Error::config(
                    "coefficient",
                    format!("unknown coefficient {coefficient:?}"),
                )
            })?;
            cmd_sweep(&config, coefficient, &parse_values(&values)?, &out)
        }
        Command::Baseline { config, out } => cmd_baseline(&config, &out),
        Command::Keys => {
            let d = RunConfig::default();
            for (key, doc) in KEYS {
                println!(
                    "{key} = {}    # {doc}",
                    d.entries().iter().find(|e| e.0 == key).map_or("", |e| &e.1)
                );
            }
            Ok(())
        }
    }
}

/// `"1..4"` (inclusive) or `"1,3,4"`.
pub fn parse_m_range(s: &str) -> Result<Vec<usize>> {
    let bad = || Error::config("m_range", format!("cannot parse {s:?}"));
    let out: Vec<usize> = if let Some((lo, hi)) = s.split_once("..") {
        let lo: usize = lo.trim().parse().map_err(|_| bad())?;
        let hi: usize = hi.trim().parse().map_err(|_| bad())?;
        (lo..=hi).collect()
    } else {
        s.split(',')
            .map(|v| v.trim().parse().map_err(|_| bad()))
            .collect::<Result<_>>()?
    };
    if out.is_empty() || out.contains(&0) {
        return Err(bad());
    }
    Ok(out)
}

pub fn parse_values(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::config("values", format!("cannot parse {v:?}")))
        })
        .collect()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Contract(format!("serializing {path:?}: {e}")))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn manifest(config: &RunConfig, started: Instant, outputs: &[&str]) -> Value {
    let echo: Map<String, Value> = config
        .entries()
        .into_iter()
        .map(|(k, v)| (k.to_string(), Value::String(v)))
        .collect();
    json!({
        "config": echo,
        "seed": config.seed,
        "threads": thread_count(),
        "wall_time_s": started.elapsed().as_secs_f64(),
        "outputs": outputs,
    })
}

pub fn cmd_train(config_path: &Path, out: &Path) -> Result<()> {
    let started = Instant::now();
    let run = RunConfig::load(config_path)?;
    let config = run.train_config()?;
    let data = dataset_for(&config)?;
    std::fs::create_dir_all(out)?;
    let mut trainer =
        Trainer::new(config.clone(), data.train.clone())?.with_checkpoints(CheckpointPolicy {
            path: out.join(CHECKPOINT_FILE),
        });
    let result = trainer.run();
    write_history_csv(&out.join(LOSS_FILE), trainer.history())?;
    result?;
    let angular = angular_error(trainer.model(), &data.manifold, &data.test)?;
    write_json(
        &out.join(MANIFEST_FILE),
        &manifest(&run, started, &[CHECKPOINT_FILE, LOSS_FILE, SUMMARY_FILE]),
    )?;
    write_json(
        &out.join(SUMMARY_FILE),
        &Summary {
            dataset: config.dataset.clone(),
            m: config.m,
            seed: config.seed,
            angular_mean_deg: Some(angular.mean_deg),
            angular_std_deg: Some(angular.std_deg),
            final_loss: trainer.history().last().map(|s| s.loss.total),
            detected_m: None,
        },
    )
}

pub fn cmd_eval(
    checkpoint_path: &Path,
    dataset: &str,
    report: &Path,
    seed: u64,
    test_points: usize,
    eval_points: usize,
) -> Result<()> {
    let model = checkpoint::load(checkpoint_path)?;
    let counts = crate::datasets::DatasetCounts {
        train: 1,
        test: test_points,
    };
    let data = make_dataset(dataset, counts, seed)?;
    if data.manifold.ambient_dim() != model.n {
        return Err(Error::Dimension(format!(
            "dataset {dataset} lives in R^{}, checkpoint in R^{}",
            data.manifold.ambient_dim(),
            model.n
        )));
    }
    let r = evaluate(&model, &data, eval_points)?;
    let summary = Summary {
        dataset: dataset.to_string(),
        m: model.m,
        seed,
        angular_mean_deg: Some(r.angular.mean_deg),
        angular_std_deg: Some(r.angular.std_deg),
        final_loss: Some(r.frame_loss),
        detected_m: None,
    };
    if let Some(dir) = report.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_json(report, &json!({ "summary": summary, "report": r }))
}

pub fn cmd_dimdetect(config_path: &Path, m_range: &[usize], out: &Path) -> Result<()> {
    let started = Instant::now();
    let run = RunConfig::load(config_path)?;
    let config = run.train_config()?;
    let data = dataset_for(&config)?;
    std::fs::create_dir_all(out)?;
    let curve = dimension_detect(&data, m_range, &config, run.eval_points)?;
    write_dimension_csv(&out.join(DIMENSION_FILE), &curve)?;
    write_json(
        &out.join(MANIFEST_FILE),
        &manifest(&run, started, &[DIMENSION_FILE, SUMMARY_FILE]),
    )?;
    write_json(
        &out.join(SUMMARY_FILE),
        &Summary {
            dataset: config.dataset.clone(),
            m: curve.detected.unwrap_or(0),
            seed: config.seed,
            angular_mean_deg: None,
            angular_std_deg: None,
            final_loss: curve
                .detected
                .and_then(|d| curve.losses.iter().find(|(m, _)| *m == d))
                .map(|(_, l)| *l),
            detected_m: curve.detected,
        },
    )
}

pub fn cmd_sweep(
    config_path: &Path,
    coefficient: Coefficient,
    values: &[f64],
    out: &Path,
) -> Result<()> {
    let started = Instant::now();
    let run = RunConfig::load(config_path)?;
    let config = run.train_config()?;
    let data = dataset_for(&config)?;
    std::fs::create_dir_all(out)?;
    let points = sensitivity_sweep(&data, coefficient, values, &config)?;
    write_sweep_csv(&out.join(SWEEP_FILE), coefficient, &points)?;
    write_json(
        &out.join(MANIFEST_FILE),
        &manifest(&run, started, &[SWEEP_FILE]),
    )
}

pub fn cmd_baseline(config_path: &Path, out: &Path) -> Result<()> {
    let started = Instant::now();
    let run = RunConfig::load(config_path)?;
    let config = run.train_config()?;
    let data = dataset_for(&config)?;
    std::fs::create_dir_all(out)?;
    let iso = IsoAeConfig {
        m: config.m,
        eta: run.isoae_eta,
        epochs: config.epochs,
        batch_size: config.batch_size,
        seed: config.seed,
        optimizer: OptimizerConfig {
            schedule: LrSchedule::Constant(run.isoae_lr),
            ..IsoAeConfig::default().optimizer
        },
        ..IsoAeConfig::default()
    };
    let (model, history) = train_isoae(&data.train, &iso)?;
    write_baseline_csv(&out.join(BASELINE_LOSS_FILE), &history)?;
    let angular = isoae_tangent_error(&model, &data.manifold, &data.test)?;
    write_json(
        &out.join(MANIFEST_FILE),
        &manifest(&run, started, &[BASELINE_LOSS_FILE, SUMMARY_FILE]),
    )?;
    write_json(
        &out.join(SUMMARY_FILE),
        &Summary {
            dataset: config.dataset.clone(),
            m: config.m,
            seed: config.seed,
            angular_mean_deg: Some(angular.mean_deg),
            angular_std_deg: Some(angular.std_deg),
            final_loss: history.last().map(|l| l.total),
            detected_m: None,
        },
    )
}

pub const BASELINE_HEADER: [&str; 4] = ["step", "reconstruction", "isotropy", "total"];

pub fn write_baseline_csv(path: &Path, history: &[IsoAeLoss]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(BASELINE_HEADER)?;
    for (step, l) in history.iter().enumerate() {
        w.write_record([
            step.to_string(),
            format!("{:?}", l.reconstruction),
            format!("{:?}", l.isotropy),
            format!("{:?}", l.total),
        ])?;
    }
    w.flush()?;
    Ok(())
}
