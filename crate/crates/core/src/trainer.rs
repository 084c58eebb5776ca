//! Minibatch training of a [`FrameModel`].
//!
//! Every batch is split into fixed chunks of [`CHUNK_ROWS`] points. Chunks are
//! evaluated in parallel on their own tapes and their gradients are summed in
//! chunk order, so the result does not depend on the number of threads.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::datasets::DatasetCounts;
use crate::error::{Error, Result};
use crate::losses::{batch_loss_and_grad, LossBreakdown, LossConfig};
use crate::models::{checkpoint, FrameConfig, FrameModel};
use crate::seeding;
use crate::tensor::Tensor;

pub const CHUNK_ROWS: usize = 25;
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;
pub const THREADS_ENV: &str = "FRAMEFLOW_THREADS";

const MODEL_STREAM: u64 = 0x6d6f64656c;
const SHUFFLE_STREAM: u64 = 0x73687566;
const SAMPLE_STREAM: u64 = 0x73616d70;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    Constant(f64),
    /// Linear interpolation from `start` at the first step to `end` at the last.
    Linear {
        start: f64,
        end: f64,
    },
}

impl LrSchedule {
    pub fn at(&self, step: usize, total: usize) -> f64 {
        match *self {
            LrSchedule::Constant(lr) => lr,
            LrSchedule::Linear { start, end } => {
                if total <= 1 {
                    start
                } else {
                    start + (end - start) * step as f64 / (total - 1) as f64
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        let good = match *self {
            LrSchedule::Constant(lr) => ok(lr),
            LrSchedule::Linear { start, end } => ok(start) && ok(end),
        };
        if good {
            Ok(())
        } else {
            Err(Error::config(
                "lr",
                format!("learning rates must be finite and non-negative, got {self:?}"),
            ))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to every parameter except `C`.
    pub weight_decay: f64,
    /// Global gradient-norm clip.
    pub clip: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            schedule: LrSchedule::Linear {
                start: 1e-2,
                end: 1e-4,
            },
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 1e-3,
            clip: Some(10.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub dataset: String,
    pub counts: DatasetCounts,
    pub m: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
    pub model: FrameConfig,
    /// Write a checkpoint every this many epochs (and always at the end).
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: "sphere".into(),
            counts: DatasetCounts::default(),
            m: 2,
            seed: 0,
            batch_size: 100,
            epochs: 200,
            optimizer: OptimizerConfig::default(),
            loss: LossConfig::default(),
            model: FrameConfig::default(),
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, data_rows: usize) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "need at least one epoch"));
        }
        if self.batch_size == 0 || self.batch_size > data_rows {
            return Err(Error::config(
                "batch_size",
                format!(
                    "need 1 <= batch_size <= {data_rows}, got {}",
                    self.batch_size
                ),
            ));
        }
        if self.m == 0 {
            return Err(Error::config("m", "need at least one field"));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::config("checkpoint_every", "must be positive"));
        }
        self.optimizer.schedule.validate()
    }

    pub fn steps_per_epoch(&self, data_rows: usize) -> usize {
        data_rows.div_ceil(self.batch_size)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub grad_norm: f64,
    pub loss: LossBreakdown,
}

/// Thread count from `FRAMEFLOW_THREADS`, else the available parallelism.
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

#[derive(Clone, Debug)]
pub(crate) struct AdamW {
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    t: i32,
}

impl AdamW {
    pub(crate) fn new(params: &[&Tensor]) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.rows(), p.cols()))
                .collect()
        };
        Self {
            first: zeros(),
            second: zeros(),
            t: 0,
        }
    }

    pub(crate) fn update(
        &mut self,
        params: Vec<&mut Tensor>,
        grads: &[Tensor],
        decay: &[bool],
        lr: f64,
        cfg: &OptimizerConfig,
    ) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for (k, p) in params.into_iter().enumerate() {
            let g = grads[k].data();
            let m = self.first[k].data_mut();
            let v = self.second[k].data_mut();
            let wd = if decay[k] { cfg.weight_decay } else { 0.0 };
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let step = (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
                *w -= lr * (step + wd * *w);
            }
        }
    }
}

fn merge(
    parts: Vec<(LossBreakdown, Vec<Tensor>, usize)>,
    total_rows: usize,
) -> (LossBreakdown, Vec<Tensor>) {
    let mut it = parts.into_iter();
    let (first, mut grads, rows) = it.next().expect("nonempty batch");
    let w = rows as f64 / total_rows as f64;
    let mut b = first.clone();
    for field in [
        &mut b.l_c,
        &mut b.r_lambda,
        &mut b.r_commute,
        &mut b.r_time,
        &mut b.r_metric,
    ] {
        *field *= w;
    }
    grads.iter_mut().for_each(|g| *g = g.scaled(w));
    for (part, g, rows) in it {
        let w = rows as f64 / total_rows as f64;
        b.l_c += w * part.l_c;
        b.r_lambda += w * part.r_lambda;
        b.r_commute += w * part.r_commute;
        b.r_time += w * part.r_time;
        b.r_metric += w * part.r_metric;
        b.fields.extend(part.fields);
        b.times.extend(part.times);
        for (acc, gk) in grads.iter_mut().zip(&g) {
            acc.add_assign(&gk.scaled(w));
        }
    }
    b.total = b.weighted_sum();
    (b, grads)
}

/// Loss and gradient of a batch, evaluated chunk by chunk.
pub fn chunked_loss_and_grad(
    model: &FrameModel,
    x: &Tensor,
    seeds: &[u64],
    config: &LossConfig,
    pool: Option<&rayon::ThreadPool>,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let rows = x.rows();
    let ranges: Vec<(usize, usize)> = (0..rows)
        .step_by(CHUNK_ROWS)
        .map(|s| (s, (s + CHUNK_ROWS).min(rows)))
        .collect();
    let eval = |&(lo, hi): &(usize, usize)| -> Result<(LossBreakdown, Vec<Tensor>, usize)> {
        let mut chunk = Tensor::zeros(hi - lo, x.cols());
        for r in lo..hi {
            chunk.row_slice_mut(r - lo).copy_from_slice(x.row_slice(r));
        }
        let (b, g) = batch_loss_and_grad(model, &chunk, &seeds[lo..hi], config)?;
        Ok((b, g, hi - lo))
    };
    let parts: Result<Vec<_>> = match pool {
        Some(p) if p.current_num_threads() > 1 => {
            p.install(|| ranges.par_iter().map(eval).collect())
        }
        _ => ranges.iter().map(eval).collect(),
    };
    Ok(merge(parts?, rows))
}

/// Where and how often checkpoints are written.
#[derive(Clone, Debug)]
pub struct CheckpointPolicy {
    pub path: PathBuf,
}

pub struct Trainer {
    pub config: TrainConfig,
    data: Tensor,
    model: FrameModel,
    optimizer: AdamW,
    decay: Vec<bool>,
    history: Vec<StepLog>,
    step: usize,
    epoch: usize,
    pool: Option<rayon::ThreadPool>,
    checkpoint: Option<CheckpointPolicy>,
}

impl Trainer {
    pub fn new(config: TrainConfig, data: Tensor) -> Result<Self> {
        let model = FrameModel::new(
            &config.model,
            data.cols(),
            config.m,
            seeding::stream_seed(config.seed, &[MODEL_STREAM]),
        )?;
        Self::with_model(config, data, model)
    }

    pub fn with_model(config: TrainConfig, data: Tensor, model: FrameModel) -> Result<Self> {
        config.validate(data.rows())?;
        config.loss.penalty.validate(model.n)?;
        if data.cols() != model.n {
            return Err(Error::Dimension(format!(
                "data has {} columns, model expects {}",
                data.cols(),
                model.n
            )));
        }
        let optimizer = AdamW::new(&model.params());
        let decay = model.param_names().iter().map(|n| n != "c").collect();
        let threads = thread_count();
        let pool = if threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .map_err(|e| Error::Contract(e.to_string()))?,
            )
        } else {
            None
        };
        Ok(Self {
            config,
            data,
            model,
            optimizer,
            decay,
            history: Vec::new(),
            step: 0,
            epoch: 0,
            pool,
            checkpoint: None,
        })
    }

    pub fn with_checkpoints(mut self, policy: CheckpointPolicy) -> Self {
        self.checkpoint = Some(policy);
        self
    }

    pub fn model(&self) -> &FrameModel {
        &self.model
    }

    pub fn into_model(self) -> FrameModel {
        self.model
    }

    pub fn history(&self) -> &[StepLog] {
        &self.history
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn total_steps(&self) -> usize {
        self.config.epochs * self.config.steps_per_epoch(self.data.rows())
    }

    /// One optimizer step on the given rows of the training data.
    pub fn step_on(&mut self, rows: &[usize], batch_index: usize) -> Result<&StepLog> {
        let mut x = Tensor::zeros(rows.len(), self.data.cols());
        for (k, &r) in rows.iter().enumerate() {
            x.row_slice_mut(k).copy_from_slice(self.data.row_slice(r));
        }
        let seeds: Vec<u64> = (0..rows.len() as u64)
            .map(|k| {
                seeding::stream_seed(
                    self.config.seed,
                    &[SAMPLE_STREAM, self.epoch as u64, batch_index as u64, k],
                )
            })
            .collect();
        let (loss, mut grads) = chunked_loss_and_grad(
            &self.model,
            &x,
            &seeds,
            &self.config.loss,
            self.pool.as_ref(),
        )?;
        if loss.total > DIVERGENCE_THRESHOLD {
            return Err(Error::Divergence {
                step: self.step,
                total: loss.total,
            });
        }
        let grad_norm = grads.iter().map(|g| g.dot(g)).sum::<f64>().sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::Numeric {
                primitive: "gradient".into(),
            });
        }
        if let Some(clip) = self.config.optimizer.clip {
            if grad_norm > clip {
                grads
                    .iter_mut()
                    .for_each(|g| *g = g.scaled(clip / grad_norm));
            }
        }
        let lr = self
            .config
            .optimizer
            .schedule
            .at(self.step, self.total_steps());
        self.optimizer.update(
            self.model.params_mut(),
            &grads,
            &self.decay,
            lr,
            &self.config.optimizer,
        );
        self.history.push(StepLog {
            step: self.step,
            epoch: self.epoch,
            lr,
            grad_norm,
            loss,
        });
        self.step += 1;
        Ok(self.history.last().expect("just pushed"))
    }

    /// Shuffles the data and runs every minibatch of the next epoch.
    pub fn run_epoch(&mut self) -> Result<()> {
        let mut order: Vec<usize> = (0..self.data.rows()).collect();
        order.shuffle(&mut seeding::rng(seeding::stream_seed(
            self.config.seed,
            &[SHUFFLE_STREAM, self.epoch as u64],
        )));
        let batches: Vec<Vec<usize>> = order
            .chunks(self.config.batch_size)
            .map(<[usize]>::to_vec)
            .collect();
        for (b, rows) in batches.iter().enumerate() {
            self.step_on(rows, b)?;
        }
        self.epoch += 1;
        if let (Some(policy), Some(every)) = (&self.checkpoint, self.config.checkpoint_every) {
            if self.epoch.is_multiple_of(every) {
                checkpoint::save(&self.model, &policy.path)?;
            }
        }
        Ok(())
    }

    /// Runs the remaining epochs and writes the final checkpoint.
    pub fn run(&mut self) -> Result<()> {
        while self.epoch < self.config.epochs {
            self.run_epoch()?;
        }
        if let Some(policy) = &self.checkpoint {
            checkpoint::save(&self.model, &policy.path)?;
        }
        Ok(())
    }
}

pub struct TrainRun {
    pub model: FrameModel,
    pub history: Vec<StepLog>,
}

pub fn train(config: &TrainConfig, data: &Tensor) -> Result<TrainRun> {
    let mut trainer = Trainer::new(config.clone(), data.clone())?;
    trainer.run()?;
    Ok(TrainRun {
        history: trainer.history,
        model: trainer.model,
    })
}

pub const HISTORY_HEADER: [&str; 7] = [
    "step",
    "l_c",
    "r_lambda",
    "r_commute",
    "r_time",
    "r_metric",
    "total",
];

pub fn write_history_csv(path: &Path, history: &[StepLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(HISTORY_HEADER)?;
    for s in history {
        let l = &s.loss;
        w.write_record([
            s.step.to_string(),
            format!("{:?}", l.l_c),
            format!("{:?}", l.r_lambda),
            format!("{:?}", l.r_commute),
            format!("{:?}", l.r_time),
            format!("{:?}", l.r_metric),
            format!("{:?}", l.total),
        ])?;
    }
    w.flush()?;
    Ok(())
}
