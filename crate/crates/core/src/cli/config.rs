//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key below may
//! appear at most once; `dataset` and `m` are required, the rest default.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::datasets::{DatasetCounts, DATASET_NAMES};
use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossWeights, Objective, TapeIntegration, TimeScaling};
use crate::models::{Activation, FrameConfig, Init};
use crate::spectral::{Estimator, Penalty, SpectralPenaltySpec};
use crate::trainer::{LrSchedule, OptimizerConfig, TrainConfig};

/// Every accepted key with a one-line description.
pub const KEYS: [(&str, &str); 40] = [
    (
        "dataset",
        "plane4d | sphere | torus | swiss_roll | paraboloid (required)",
    ),
    ("m", "number of learned fields (required)"),
    ("seed", "master seed for data, initialization and sampling"),
    ("train_points", "training samples drawn from the manifold"),
    ("test_points", "held-out samples"),
    ("eval_points", "test points used by flow-based measurements"),
    ("epochs", "passes over the training set"),
    ("batch_size", "rows per optimizer step"),
    ("lr_schedule", "linear | constant"),
    (
        "lr_start",
        "learning rate at the first step (the constant rate)",
    ),
    (
        "lr_end",
        "learning rate at the last step of a linear schedule",
    ),
    ("beta1", "first-moment decay"),
    ("beta2", "second-moment decay"),
    ("eps", "denominator offset"),
    ("weight_decay", "decoupled weight decay, not applied to C"),
    ("clip", "global gradient-norm clip, or none"),
    ("alpha", "weight of the spectral penalty"),
    ("beta", "weight of the commutator term"),
    ("zeta", "weight of the time term"),
    ("eta", "weight of the conformal metric term"),
    ("penalty", "softmin | relu-squared"),
    ("estimator", "exact | lanczos"),
    ("lanczos_steps", "Krylov steps per probe"),
    ("lanczos_probes", "Rademacher probes per point"),
    ("time_scaling", "entrywise | product"),
    ("objective", "flow-matching | integrated"),
    ("rtol", "relative tolerance of the integrated objective"),
    ("atol", "absolute tolerance of the integrated objective"),
    (
        "integration_max_steps",
        "step budget per flow of the integrated objective",
    ),
    (
        "path_points",
        "states per flow where the integrated penalty is evaluated",
    ),
    ("hidden", "comma-separated hidden widths"),
    ("activation", "lipswish | tanh"),
    ("init", "glorot-normal | tanh-tailored"),
    ("field_radius", "minimum field norm"),
    ("time_floor", "lower bound of the softplus time head"),
    ("sigma_net", "learn conformal factors (true | false)"),
    ("signed_time", "identity time head (true | false)"),
    ("checkpoint_every", "epochs between checkpoints, or none"),
    ("isoae_eta", "isotropy weight of the autoencoder baseline"),
    ("isoae_lr", "learning rate of the autoencoder baseline"),
];

/// Parsed configuration, one field per key.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: String,
    pub m: usize,
    pub seed: u64,
    pub train_points: usize,
    pub test_points: usize,
    pub eval_points: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_schedule: String,
    pub lr_start: f64,
    pub lr_end: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip: Option<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub zeta: f64,
    pub eta: f64,
    pub penalty: Penalty,
    pub estimator: String,
    pub lanczos_steps: usize,
    pub lanczos_probes: usize,
    pub time_scaling: TimeScaling,
    pub objective: String,
    pub rtol: f64,
    pub atol: f64,
    pub integration_max_steps: usize,
    pub path_points: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub init: Init,
    pub field_radius: f64,
    pub time_floor: f64,
    pub sigma_net: bool,
    pub signed_time: bool,
    pub checkpoint_every: Option<usize>,
    pub isoae_eta: f64,
    pub isoae_lr: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let integ = TapeIntegration::default();
        let (lr_start, lr_end) = match t.optimizer.schedule {
            LrSchedule::Linear { start, end } => (start, end),
            LrSchedule::Constant(lr) => (lr, lr),
        };
        Self {
            dataset: t.dataset,
            m: t.m,
            seed: t.seed,
            train_points: t.counts.train,
            test_points: t.counts.test,
            eval_points: 200,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr_schedule: "linear".into(),
            lr_start,
            lr_end,
            beta1: t.optimizer.beta1,
            beta2: t.optimizer.beta2,
            eps: t.optimizer.eps,
            weight_decay: t.optimizer.weight_decay,
            clip: t.optimizer.clip,
            alpha: t.loss.weights.alpha,
            beta: t.loss.weights.beta,
            zeta: t.loss.weights.zeta,
            eta: t.loss.weights.eta,
            penalty: t.loss.penalty.penalty,
            estimator: "exact".into(),
            lanczos_steps: 3,
            lanczos_probes: 8,
            time_scaling: t.loss.time_scaling,
            objective: t.loss.objective.name().into(),
            rtol: integ.rtol,
            atol: integ.atol,
            integration_max_steps: integ.max_steps,
            path_points: integ.path_points,
            hidden: t.model.hidden,
            activation: t.model.activation,
            init: t.model.init,
            field_radius: t.model.field_radius,
            time_floor: t.model.time_floor,
            sigma_net: t.model.sigma_net,
            signed_time: t.model.signed_time,
            checkpoint_every: t.checkpoint_every,
            isoae_eta: 1.0,
            isoae_lr: 1e-3,
        }
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse {value:?}")))
}

fn optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "none" {
        Ok(None)
    } else {
        num(key, value).map(Some)
    }
}

fn choice<T>(key: &str, value: &str, parsed: Option<T>) -> Result<T> {
    parsed.ok_or_else(|| Error::config(key, format!("unknown value {value:?}")))
}

fn one_of(key: &str, value: &str, allowed: &[&str]) -> Result<String> {
    if allowed.contains(&value) {
        Ok(value.to_string())
    } else {
        Err(Error::config(
            key,
            format!(
                "unknown value {value:?}, expected one of {}",
                allowed.join(", ")
            ),
        ))
    }
}

fn show_opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or("none".into(), T::to_string)
}

impl RunConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "dataset" => self.dataset = one_of(key, v, &DATASET_NAMES)?,
            "m" => self.m = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "train_points" => self.train_points = num(key, v)?,
            "test_points" => self.test_points = num(key, v)?,
            "eval_points" => self.eval_points = num(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "lr_schedule" => self.lr_schedule = one_of(key, v, &["linear", "constant"])?,
            "lr_start" => self.lr_start = num(key, v)?,
            "lr_end" => self.lr_end = num(key, v)?,
            "beta1" => self.beta1 = num(key, v)?,
            "beta2" => self.beta2 = num(key, v)?,
            "eps" => self.eps = num(key, v)?,
            "weight_decay" => self.weight_decay = num(key, v)?,
            "clip" => self.clip = optional(key, v)?,
            "alpha" => self.alpha = num(key, v)?,
            "beta" => self.beta = num(key, v)?,
            "zeta" => self.zeta = num(key, v)?,
            "eta" => self.eta = num(key, v)?,
            "penalty" => self.penalty = choice(key, v, Penalty::parse(v))?,
            "estimator" => self.estimator = one_of(key, v, &["exact", "lanczos"])?,
            "lanczos_steps" => self.lanczos_steps = num(key, v)?,
            "lanczos_probes" => self.lanczos_probes = num(key, v)?,
            "time_scaling" => self.time_scaling = choice(key, v, TimeScaling::parse(v))?,
            "objective" => self.objective = one_of(key, v, &["flow-matching", "integrated"])?,
            "rtol" => self.rtol = num(key, v)?,
            "atol" => self.atol = num(key, v)?,
            "integration_max_steps" => self.integration_max_steps = num(key, v)?,
            "path_points" => self.path_points = num(key, v)?,
            "hidden" => {
                self.hidden = v
                    .split(',')
                    .map(|w| num(key, w.trim()))
                    .collect::<Result<_>>()?
            }
            "activation" => self.activation = choice(key, v, Activation::parse(v))?,
            "init" => self.init = choice(key, v, Init::parse(v))?,
            "field_radius" => self.field_radius = num(key, v)?,
            "time_floor" => self.time_floor = num(key, v)?,
            "sigma_net" => self.sigma_net = num(key, v)?,
            "signed_time" => self.signed_time = num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = optional(key, v)?,
            "isoae_eta" => self.isoae_eta = num(key, v)?,
            "isoae_lr" => self.isoae_lr = num(key, v)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        match key {
            "dataset" => self.dataset.clone(),
            "m" => self.m.to_string(),
            "seed" => self.seed.to_string(),
            "train_points" => self.train_points.to_string(),
            "test_points" => self.test_points.to_string(),
            "eval_points" => self.eval_points.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr_schedule" => self.lr_schedule.clone(),
            "lr_start" => format!("{:?}", self.lr_start),
            "lr_end" => format!("{:?}", self.lr_end),
            "beta1" => format!("{:?}", self.beta1),
            "beta2" => format!("{:?}", self.beta2),
            "eps" => format!("{:?}", self.eps),
            "weight_decay" => format!("{:?}", self.weight_decay),
            "clip" => self.clip.map_or("none".into(), |c| format!("{c:?}")),
            "alpha" => format!("{:?}", self.alpha),
            "beta" => format!("{:?}", self.beta),
            "zeta" => format!("{:?}", self.zeta),
            "eta" => format!("{:?}", self.eta),
            "penalty" => self.penalty.name().into(),
            "estimator" => self.estimator.clone(),
            "lanczos_steps" => self.lanczos_steps.to_string(),
            "lanczos_probes" => self.lanczos_probes.to_string(),
            "time_scaling" => self.time_scaling.name().into(),
            "objective" => self.objective.clone(),
            "rtol" => format!("{:?}", self.rtol),
            "atol" => format!("{:?}", self.atol),
            "integration_max_steps" => self.integration_max_steps.to_string(),
            "path_points" => self.path_points.to_string(),
            "hidden" => self
                .hidden
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(","),
            "activation" => self.activation.name().into(),
            "init" => self.init.name().into(),
            "field_radius" => format!("{:?}", self.field_radius),
            "time_floor" => format!("{:?}", self.time_floor),
            "sigma_net" => self.sigma_net.to_string(),
            "signed_time" => self.signed_time.to_string(),
            "checkpoint_every" => show_opt(&self.checkpoint_every),
            "isoae_eta" => format!("{:?}", self.isoae_eta),
            "isoae_lr" => format!("{:?}", self.isoae_lr),
            _ => unreachable!("every listed key is rendered"),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut config = RunConfig::default();
        let mut seen = BTreeSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}", no + 1), "expected `key = value`")
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::config(key, "given more than once"));
            }
            config.set(key, value)?;
        }
        for required in ["dataset", "m"] {
            if !seen.contains(required) {
                return Err(Error::config(required, "missing required key"));
            }
        }
        config.train_config()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Every key and its value, in [`KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        KEYS.iter().map(|(k, _)| (*k, self.get(k))).collect()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let schedule = match self.lr_schedule.as_str() {
            "constant" => LrSchedule::Constant(self.lr_start),
            _ => LrSchedule::Linear {
                start: self.lr_start,
                end: self.lr_end,
            },
        };
        schedule.validate()?;
        let estimator = match self.estimator.as_str() {
            "lanczos" => Estimator::Lanczos {
                steps: self.lanczos_steps,
                probes: self.lanczos_probes,
            },
            _ => Estimator::ExactEigen,
        };
        let objective = match self.objective.as_str() {
            "integrated" => Objective::Integrated(TapeIntegration {
                rtol: self.rtol,
                atol: self.atol,
                max_steps: self.integration_max_steps,
                path_points: self.path_points,
            }),
            _ => Objective::FlowMatching,
        };
        for (key, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("zeta", self.zeta),
            ("eta", self.eta),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(
                    key,
                    format!("must be finite and non-negative, got {v}"),
                ));
            }
        }
        for (key, v) in [("rtol", self.rtol), ("atol", self.atol)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(key, format!("must be positive, got {v}")));
            }
        }
        if self.integration_max_steps == 0 {
            return Err(Error::config("integration_max_steps", "must be positive"));
        }
        if self.train_points == 0 || self.test_points == 0 || self.eval_points == 0 {
            return Err(Error::config(
                "train_points",
                "point counts must be positive",
            ));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::config("hidden", "need at least one positive width"));
        }
        let config = TrainConfig {
            dataset: self.dataset.clone(),
            counts: DatasetCounts {
                train: self.train_points,
                test: self.test_points,
            },
            m: self.m,
            seed: self.seed,
            batch_size: self.batch_size,
            epochs: self.epochs,
            optimizer: OptimizerConfig {
                schedule,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
                weight_decay: self.weight_decay,
                clip: self.clip,
            },
            loss: LossConfig {
                weights: LossWeights {
                    alpha: self.alpha,
                    beta: self.beta,
                    zeta: self.zeta,
                    eta: self.eta,
                },
                penalty: SpectralPenaltySpec {
                    penalty: self.penalty,
                    estimator,
                },
                time_scaling: self.time_scaling,
                objective,
            },
            model: FrameConfig {
                hidden: self.hidden.clone(),
                activation: self.activation,
                init: self.init,
                field_radius: self.field_radius,
                time_floor: self.time_floor,
                sigma_net: self.sigma_net,
                signed_time: self.signed_time,
            },
            checkpoint_every: self.checkpoint_every,
        };
        config.validate(self.train_points)?;
        Ok(config)
    }
}
