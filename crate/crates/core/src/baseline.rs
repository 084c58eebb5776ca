//! Isometric autoencoder baseline.
//!
//! The encoder is pushed toward `J_e J_e^T = I` and the decoder Jacobian at
//! encoded points gives the estimated tangent frame.

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::autodiff::{Dual, Tape, Var};
use crate::datasets::Manifold;
use crate::error::{Error, Result};
use crate::eval::{tangency_deviation_deg, AngularError, Stats};
use crate::models::{Activation, BoundMlp, Head, Init, Mlp, MlpSpec};
use crate::seeding;
use crate::tensor::Tensor;
use crate::trainer::{AdamW, LrSchedule, OptimizerConfig, DIVERGENCE_THRESHOLD};

const MODEL_STREAM: u64 = 0x69736f;
const SHUFFLE_STREAM: u64 = 0x69736f73;

#[derive(Clone, Debug, PartialEq)]
pub struct IsoAeConfig {
    pub m: usize,
    pub hidden: Vec<usize>,
    /// Weight of the isotropy term.
    pub eta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
}

impl Default for IsoAeConfig {
    fn default() -> Self {
        Self {
            m: 2,
            hidden: vec![32; 4],
            eta: 1.0,
            epochs: 200,
            batch_size: 100,
            seed: 0,
            optimizer: OptimizerConfig {
                schedule: LrSchedule::Constant(1e-3),
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                weight_decay: 0.0,
                clip: None,
            },
        }
    }
}

impl IsoAeConfig {
    pub fn validate(&self, n: usize, rows: usize) -> Result<()> {
        if self.m == 0 || self.m > n {
            return Err(Error::config(
                "m",
                format!("need 1 <= m <= {n}, got {}", self.m),
            ));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::config("eta", "must be finite and non-negative"));
        }
        if self.batch_size == 0 || self.batch_size > rows {
            return Err(Error::config(
                "batch_size",
                format!("need 1 <= batch_size <= {rows}"),
            ));
        }
        self.optimizer.schedule.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IsoAeModel {
    pub n: usize,
    pub m: usize,
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub eta: f64,
}

/// Batch means of the autoencoder objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct IsoAeLoss {
    pub reconstruction: f64,
    pub isotropy: f64,
    pub total: f64,
}

fn spec(widths: Vec<usize>) -> MlpSpec {
    MlpSpec {
        widths,
        activation: Activation::LipSwish,
        head: Head::Identity,
        init: Init::GlorotNormal,
    }
}

impl IsoAeModel {
    pub fn new(n: usize, config: &IsoAeConfig) -> Result<Self> {
        let mut rng = seeding::rng(seeding::stream_seed(config.seed, &[MODEL_STREAM]));
        let widths = |a: usize, b: usize| {
            let mut w = vec![a];
            w.extend(&config.hidden);
            w.push(b);
            w
        };
        Ok(Self {
            n,
            m: config.m,
            encoder: Mlp::new(spec(widths(n, config.m)), &mut rng)?,
            decoder: Mlp::new(spec(widths(config.m, n)), &mut rng)?,
            eta: config.eta,
        })
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p
    }

    pub fn encode(&self, x: &Tensor) -> Tensor {
        self.encoder.forward(x)
    }

    pub fn decode(&self, z: &Tensor) -> Tensor {
        self.decoder.forward(z)
    }

    /// Decoder Jacobian columns at the code of each point, `m` tensors of
    /// shape `rows x n`.
    pub fn tangent_frame(&self, x: &Tensor) -> Vec<Tensor> {
        let tape = Tape::new();
        let dec = self.decoder.bind_frozen(&tape);
        let z = tape.constant(self.encode(x));
        dec.forward(&Dual::with_basis(z))
            .tangents
            .iter()
            .map(Var::value)
            .collect()
    }
}

/// `J_e J_e^T` per row as `m^2` columns, from `m` reverse sweeps.
fn encoder_gram(enc: &BoundMlp, x: &Var, m: usize) -> Vec<Var> {
    let rows = x.rows();
    let jac_rows: Vec<Var> = (0..m)
        .map(|a| {
            let mut e = Tensor::zeros(rows, m);
            for r in 0..rows {
                e.set(r, a, 1.0);
            }
            enc.vjp(x, &x.constant_like(e))
        })
        .collect();
    let mut out = Vec::with_capacity(m * m);
    for a in 0..m {
        for b in 0..m {
            out.push((&jac_rows[a] * &jac_rows[b]).sum_cols());
        }
    }
    out
}

fn loss_on_tape(enc: &BoundMlp, dec: &BoundMlp, x: &Var, m: usize, eta: f64) -> (Var, Var) {
    let z = enc.forward(&Dual::constant(x.clone())).primal;
    let recon = dec.forward(&Dual::constant(z)).primal;
    let n = x.cols() as f64;
    let rec = (&recon - x).square().sum_cols().scale(1.0 / n);
    let gram = encoder_gram(enc, x, m);
    let iso = gram
        .into_iter()
        .enumerate()
        .map(|(k, g)| {
            let target = if k / m == k % m { -1.0 } else { 0.0 };
            g.add_scalar(target).square()
        })
        .reduce(|a, b| &a + &b)
        .expect("m >= 1");
    (rec, iso.scale(eta))
}

/// Reconstruction MSE plus `eta |J_e J_e^T - I|_F^2`, averaged over rows.
pub fn isoae_loss(model: &IsoAeModel, x: &Tensor) -> IsoAeLoss {
    let tape = Tape::new();
    let enc = model.encoder.bind_frozen(&tape);
    let dec = model.decoder.bind_frozen(&tape);
    let (rec, iso) = loss_on_tape(&enc, &dec, &tape.constant(x.clone()), model.m, model.eta);
    let mean = |v: &Var| v.with_value(|t| t.sum() / t.len() as f64);
    let (reconstruction, isotropy) = (mean(&rec), mean(&iso));
    IsoAeLoss {
        reconstruction,
        isotropy,
        total: reconstruction + isotropy,
    }
}

pub fn isoae_loss_and_grad(model: &IsoAeModel, x: &Tensor) -> Result<(IsoAeLoss, Vec<Tensor>)> {
    let tape = Tape::new();
    let enc = model.encoder.bind(&tape);
    let dec = model.decoder.bind(&tape);
    let (rec, iso) = loss_on_tape(&enc, &dec, &tape.constant(x.clone()), model.m, model.eta);
    let total = (&rec + &iso).mean();
    let mean = |v: &Var| v.with_value(|t| t.sum() / t.len() as f64);
    let loss = IsoAeLoss {
        reconstruction: mean(&rec),
        isotropy: mean(&iso),
        total: total.with_value(|t| t.get(0, 0)),
    };
    if !loss.total.is_finite() {
        return Err(Error::Numeric {
            primitive: "isoae_loss".into(),
        });
    }
    let mut grads = total.backward()?;
    let vars = enc.vars().into_iter().chain(dec.vars());
    Ok((loss, vars.map(|v| grads.take(&v)).collect()))
}

/// Trains an autoencoder on `data`; returns the model and the per-step loss.
pub fn train_isoae(data: &Tensor, config: &IsoAeConfig) -> Result<(IsoAeModel, Vec<IsoAeLoss>)> {
    config.validate(data.cols(), data.rows())?;
    let mut model = IsoAeModel::new(data.cols(), config)?;
    let mut opt = AdamW::new(&model.params());
    let decay = vec![true; model.params().len()];
    let per_epoch = data.rows() / config.batch_size;
    let total = per_epoch * config.epochs;
    let mut history = Vec::with_capacity(total);
    let mut order: Vec<usize> = (0..data.rows()).collect();
    for epoch in 0..config.epochs {
        let mut rng = seeding::rng(seeding::stream_seed(
            config.seed,
            &[SHUFFLE_STREAM, epoch as u64],
        ));
        order.shuffle(&mut rng);
        for b in 0..per_epoch {
            let rows = &order[b * config.batch_size..(b + 1) * config.batch_size];
            let mut x = Tensor::zeros(rows.len(), data.cols());
            for (k, &r) in rows.iter().enumerate() {
                x.row_slice_mut(k).copy_from_slice(data.row_slice(r));
            }
            let (loss, grads) = isoae_loss_and_grad(&model, &x)?;
            if loss.total > DIVERGENCE_THRESHOLD {
                return Err(Error::Divergence {
                    step: history.len(),
                    total: loss.total,
                });
            }
            let lr = config.optimizer.schedule.at(history.len(), total);
            opt.update(model.params_mut(), &grads, &decay, lr, &config.optimizer);
            history.push(loss);
        }
    }
    Ok((model, history))
}

/// Tangency deviation of every decoder Jacobian column at every point.
pub fn isoae_tangent_error(
    model: &IsoAeModel,
    manifold: &Manifold,
    points: &Tensor,
) -> Result<AngularError> {
    if points.cols() != model.n {
        return Err(Error::Dimension(format!(
            "points have {} coordinates, model expects {}",
            points.cols(),
            model.n
        )));
    }
    let frame = model.tangent_frame(points);
    let mut all = Vec::with_capacity(points.rows() * model.m);
    let mut per_field = vec![0.0; model.m];
    for r in 0..points.rows() {
        let normal = manifold.normal_at(points.row_slice(r));
        for (j, col) in frame.iter().enumerate() {
            let a = tangency_deviation_deg(col.row_slice(r), &normal);
            per_field[j] += a / points.rows() as f64;
            all.push(a);
        }
    }
    let s = Stats::of(&all);
    Ok(AngularError {
        mean_deg: s.mean,
        std_deg: s.std,
        per_field_deg: per_field,
    })
}
