//! Fully connected networks with the output heads used by the frame model.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Dual, Tape, UnaryFn, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    /// `x * sigmoid(x) / 1.1`
    LipSwish,
}

impl Activation {
    pub fn unary(self) -> UnaryFn {
        match self {
            Activation::Tanh => UnaryFn::Tanh,
            Activation::LipSwish => UnaryFn::LipSwish,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::LipSwish => "lipswish",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tanh" => Some(Activation::Tanh),
            "lipswish" => Some(Activation::LipSwish),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Head {
    Identity,
    /// `max(softplus(y), floor)`
    Softplus {
        floor: f64,
    },
    /// Splits the output into consecutive blocks of `block` entries and maps
    /// each block `y` to `y * max(1, radius / |y|)`.
    SphericalProjection {
        radius: f64,
        block: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Weights drawn from `N(0, 2 / (fan_in + fan_out))`.
    GlorotNormal,
    /// Periodic identity plus small Gaussian noise, keeping tanh pre-activations
    /// near the identity regime.
    TanhTailored,
}

impl Init {
    pub fn name(self) -> &'static str {
        match self {
            Init::GlorotNormal => "glorot-normal",
            Init::TanhTailored => "tanh-tailored",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "glorot-normal" => Some(Init::GlorotNormal),
            "tanh-tailored" => Some(Init::TanhTailored),
            _ => None,
        }
    }
}

/// Noise level added to the periodic identity of the tanh-tailored scheme.
pub const TANH_INIT_NOISE: f64 = 0.15;

#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    /// Input width, hidden widths, output width.
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub head: Head,
    pub init: Init,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 || self.widths.contains(&0) {
            return Err(Error::Contract(format!(
                "invalid layer widths {:?}",
                self.widths
            )));
        }
        match self.head {
            Head::SphericalProjection { radius, block } => {
                if radius <= 0.0 || block == 0 || !self.output_dim().is_multiple_of(block) {
                    return Err(Error::Contract(format!(
                        "spherical projection needs radius > 0 and block dividing the output (radius {radius}, block {block})"
                    )));
                }
            }
            Head::Softplus { floor } if floor < 0.0 => {
                return Err(Error::Contract(
                    "softplus floor must be non-negative".into(),
                ));
            }
            _ => {}
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("validated widths")
    }

    /// `sum_i (w_i + 1) * w_{i+1}`.
    pub fn parameter_count(&self) -> usize {
        self.widths.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    /// `out x in` per layer.
    pub weights: Vec<Tensor>,
    /// `1 x out` per layer.
    pub biases: Vec<Tensor>,
}

fn init_weight(init: Init, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let mut w = Tensor::zeros(fan_out, fan_in);
    match init {
        Init::GlorotNormal => {
            let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            w.data_mut()
                .iter_mut()
                .for_each(|v| *v = normal.sample(rng));
        }
        Init::TanhTailored => {
            let normal =
                Normal::new(0.0, TANH_INIT_NOISE / (fan_in as f64).sqrt()).expect("finite std");
            for i in 0..fan_out {
                for j in 0..fan_in {
                    let base = if j == i % fan_in { 1.0 } else { 0.0 };
                    w.set(i, j, base + normal.sample(rng));
                }
            }
        }
    }
    w
}

impl Mlp {
    pub fn new(spec: MlpSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in spec.widths.windows(2) {
            weights.push(init_weight(spec.init, w[0], w[1], rng));
            biases.push(Tensor::zeros(1, w[1]));
        }
        Ok(Self {
            spec,
            weights,
            biases,
        })
    }

    pub fn layers(&self) -> usize {
        self.weights.len()
    }

    pub fn parameter_count(&self) -> usize {
        self.weights
            .iter()
            .chain(&self.biases)
            .map(Tensor::len)
            .sum()
    }

    /// Parameters in binding order: weight then bias, layer by layer.
    pub fn params(&self) -> Vec<&Tensor> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        (0..self.layers())
            .flat_map(|l| [format!("{prefix}.{l}.weight"), format!("{prefix}.{l}.bias")])
            .collect()
    }

    /// Plain evaluation on a `rows x in` batch.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let act = self.spec.activation.unary();
        let mut h = x.clone();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = h.matmul_t(w).expect("layer shapes");
            for r in 0..z.rows() {
                for (o, bv) in z.row_slice_mut(r).iter_mut().zip(b.data()) {
                    *o += bv;
                }
            }
            h = if l + 1 < self.layers() {
                z.map(|v| act.value(v))
            } else {
                z
            };
        }
        apply_head_plain(self.spec.head, h)
    }

    /// Registers every parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &Tape) -> BoundMlp {
        self.bind_with(tape, true)
    }

    /// Registers parameters as constants (evaluation only).
    pub fn bind_frozen(&self, tape: &Tape) -> BoundMlp {
        self.bind_with(tape, false)
    }

    fn bind_with(&self, tape: &Tape, trainable: bool) -> BoundMlp {
        let leaf = |t: &Tensor| {
            if trainable {
                tape.var(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        BoundMlp {
            spec: self.spec.clone(),
            weights: self.weights.iter().map(leaf).collect(),
            biases: self.biases.iter().map(leaf).collect(),
        }
    }
}

fn apply_head_plain(head: Head, mut y: Tensor) -> Tensor {
    match head {
        Head::Identity => y,
        Head::Softplus { floor } => y.map(|v| UnaryFn::Softplus.value(v).max(floor)),
        Head::SphericalProjection { radius, block } => {
            for r in 0..y.rows() {
                for chunk in y.row_slice_mut(r).chunks_mut(block) {
                    let norm = (chunk.iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt();
                    let s = (radius / norm).max(1.0);
                    chunk.iter_mut().for_each(|v| *v *= s);
                }
            }
            y
        }
    }
}

/// Keeps the projection finite at an exactly vanishing output.
const NORM_EPS: f64 = 1e-30;

/// An [`Mlp`] whose parameters live on a tape.
#[derive(Clone)]
pub struct BoundMlp {
    pub spec: MlpSpec,
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

impl BoundMlp {
    pub fn vars(&self) -> Vec<Var> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w.clone(), b.clone()])
            .collect()
    }

    /// Forward pass propagating every tangent direction of `x`.
    pub fn forward(&self, x: &Dual) -> Dual {
        let act = self.spec.activation.unary();
        let layers = self.weights.len();
        let mut h = x.clone();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let z = h.affine(w, b);
            h = if l + 1 < layers { z.unary(act) } else { z };
        }
        apply_head(self.spec.head, &h)
    }

    /// `J(x)^T u` for each row, recorded on the tape so that it remains
    /// differentiable in the parameters.
    pub fn vjp(&self, x: &Var, u: &Var) -> Var {
        let act = self.spec.activation.unary();
        let d_act = act
            .derivative_fn()
            .expect("activations carry a derivative primitive");
        let layers = self.weights.len();
        let mut pre = Vec::with_capacity(layers);
        let mut h = x.clone();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let z = h.matmul_t(w).add_row(b);
            h = if l + 1 < layers {
                z.unary(act)
            } else {
                z.clone()
            };
            pre.push(z);
        }
        let mut g = head_vjp(self.spec.head, &pre[layers - 1], u);
        for l in (0..layers).rev() {
            if l + 1 < layers {
                g = &pre[l].unary(d_act) * &g;
            }
            g = g.matmul(&self.weights[l]);
        }
        g
    }
}

fn apply_head(head: Head, y: &Dual) -> Dual {
    match head {
        Head::Identity => y.clone(),
        Head::Softplus { floor } => y.unary(UnaryFn::Softplus).clamp_min(floor),
        Head::SphericalProjection { radius, block } => {
            let parts: Vec<Dual> = (0..y.primal.cols() / block)
                .map(|j| {
                    let yj = y.slice_cols(j * block, block);
                    let norm = yj
                        .unary(UnaryFn::Square)
                        .sum_cols()
                        .add_scalar(NORM_EPS)
                        .unary(UnaryFn::Sqrt);
                    let scale = norm.unary(UnaryFn::Recip).scale(radius).clamp_min(1.0);
                    yj.mul_col(&scale)
                })
                .collect();
            Dual::concat(&parts)
        }
    }
}

/// Cotangent of the head output pulled back to its input `z`.
fn head_vjp(head: Head, z: &Var, u: &Var) -> Var {
    match head {
        Head::Identity => u.clone(),
        Head::Softplus { floor } => {
            let mask: Vec<bool> = z.with_value(|v| {
                v.data()
                    .iter()
                    .map(|&x| UnaryFn::Softplus.value(x) > floor)
                    .collect()
            });
            let g = &z.unary(UnaryFn::Sigmoid) * u;
            let zero = z.constant_like(Tensor::zeros(z.rows(), z.cols()));
            Var::select(mask, &g, &zero)
        }
        Head::SphericalProjection { radius, block } => {
            let parts: Vec<Var> = (0..z.cols() / block)
                .map(|j| {
                    let zj = z.slice_cols(j * block, block);
                    let uj = u.slice_cols(j * block, block);
                    let norm = zj.square().sum_cols().add_scalar(NORM_EPS).sqrt();
                    let ratio = norm.recip().scale(radius);
                    let scale = ratio.clamp_min(1.0);
                    // below the floor: d(z r/|z|) = r/|z| (I - z z^T / |z|^2)
                    let active: Vec<bool> =
                        ratio.with_value(|v| v.data().iter().map(|&x| x > 1.0).collect());
                    let zu = (&zj * &uj).sum_cols();
                    let coef = (&zu * &norm.square().recip()).mul_col(&scale);
                    let corr = zj.mul_col(&coef);
                    let mask: Vec<bool> = active
                        .iter()
                        .flat_map(|&a| std::iter::repeat_n(a, block))
                        .collect();
                    let zero = zj.constant_like(Tensor::zeros(zj.rows(), block));
                    let corr = Var::select(mask, &corr, &zero);
                    &uj.mul_col(&scale) - &corr
                })
                .collect();
            Var::concat(&parts)
        }
    }
}
