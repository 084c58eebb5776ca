//! The learnable quintuple `(F, T, sigma, s, C)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::mlp::{Activation, BoundMlp, Head, Init, Mlp, MlpSpec};
use crate::autodiff::{Dual, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Shared architecture knobs for the four networks.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub init: Init,
    /// Minimum column norm enforced by the field head.
    pub field_radius: f64,
    /// Floor applied after the softplus time head.
    pub time_floor: f64,
    /// Replace the zero conformal factor by a trainable network.
    pub sigma_net: bool,
    /// Allow signed time functions (identity head instead of softplus).
    pub signed_time: bool,
}

impl Default for FrameConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32; 4],
            activation: Activation::LipSwish,
            init: Init::GlorotNormal,
            field_radius: 1e-2,
            time_floor: 1e-8,
            sigma_net: false,
            signed_time: false,
        }
    }
}

/// One [`MlpSpec`] per network.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameArchitecture {
    pub f_net: MlpSpec,
    pub t_net: MlpSpec,
    pub sigma_net: Option<MlpSpec>,
    pub s_net: MlpSpec,
}

impl FrameArchitecture {
    pub fn standard(n: usize, m: usize, config: &FrameConfig) -> Self {
        let widths = |input: usize, output: usize| {
            let mut w = vec![input];
            w.extend(&config.hidden);
            w.push(output);
            w
        };
        let spec = |input, output, head| MlpSpec {
            widths: widths(input, output),
            activation: config.activation,
            head,
            init: config.init,
        };
        let t_head = if config.signed_time {
            Head::Identity
        } else {
            Head::Softplus {
                floor: config.time_floor,
            }
        };
        Self {
            f_net: spec(
                n,
                n * m,
                Head::SphericalProjection {
                    radius: config.field_radius,
                    block: n,
                },
            ),
            t_net: spec(n, m, t_head),
            sigma_net: config.sigma_net.then(|| spec(n, m, Head::Identity)),
            s_net: spec(n + 1, n, Head::Identity),
        }
    }

    fn validate(&self, n: usize, m: usize) -> Result<()> {
        if m == 0 || m > n {
            return Err(Error::Dimension(format!(
                "need 1 <= m <= n, got n = {n}, m = {m}"
            )));
        }
        let check = |name: &str, spec: &MlpSpec, input: usize, output: usize| {
            spec.validate()?;
            if spec.input_dim() != input || spec.output_dim() != output {
                return Err(Error::Dimension(format!(
                    "{name} maps {} -> {}, expected {input} -> {output}",
                    spec.input_dim(),
                    spec.output_dim()
                )));
            }
            Ok(())
        };
        check("f_net", &self.f_net, n, n * m)?;
        check("t_net", &self.t_net, n, m)?;
        if let Some(s) = &self.sigma_net {
            check("sigma_net", s, n, m)?;
        }
        check("s_net", &self.s_net, n + 1, n)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameModel {
    pub n: usize,
    pub m: usize,
    pub f_net: Mlp,
    pub t_net: Mlp,
    /// `None` is the constant-zero conformal factor.
    pub sigma_net: Option<Mlp>,
    pub s_net: Mlp,
    /// Reference point, `1 x n`.
    pub c: Tensor,
}

/// Initializes every network from `seed`, then draws `C` from `U[-0.5, 0.5]^n`.
pub fn init_frame_model(
    arch: FrameArchitecture,
    n: usize,
    m: usize,
    seed: u64,
) -> Result<FrameModel> {
    arch.validate(n, m)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f_net = Mlp::new(arch.f_net, &mut rng)?;
    let t_net = Mlp::new(arch.t_net, &mut rng)?;
    let sigma_net = arch.sigma_net.map(|s| Mlp::new(s, &mut rng)).transpose()?;
    let s_net = Mlp::new(arch.s_net, &mut rng)?;
    let c = Tensor::row(
        &(0..n)
            .map(|_| rng.gen_range(-0.5..=0.5))
            .collect::<Vec<_>>(),
    );
    Ok(FrameModel {
        n,
        m,
        f_net,
        t_net,
        sigma_net,
        s_net,
        c,
    })
}

/// Plain evaluation of the fields on a batch.
#[derive(Clone, Debug)]
pub struct FieldValues {
    pub n: usize,
    pub m: usize,
    /// `rows x (n m)`, field `j` in columns `j n .. (j + 1) n`.
    pub f: Tensor,
    /// `rows x m`
    pub t: Tensor,
    /// `rows x m`
    pub sigma: Tensor,
}

impl FieldValues {
    pub fn field(&self, row: usize, j: usize) -> &[f64] {
        &self.f.row_slice(row)[j * self.n..(j + 1) * self.n]
    }

    /// `F(x)` of one row as an `n x m` matrix with the fields as columns.
    pub fn frame(&self, row: usize) -> Tensor {
        let mut out = Tensor::zeros(self.n, self.m);
        for j in 0..self.m {
            for (k, v) in self.field(row, j).iter().enumerate() {
                out.set(k, j, *v);
            }
        }
        out
    }

    /// `sum_j T_j(x) F_j(x)` of one row.
    pub fn combined(&self, row: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.n];
        for j in 0..self.m {
            let tj = self.t.get(row, j);
            v.iter_mut()
                .zip(self.field(row, j))
                .for_each(|(a, f)| *a += tj * f);
        }
        v
    }
}

impl FrameModel {
    pub fn new(config: &FrameConfig, n: usize, m: usize, seed: u64) -> Result<Self> {
        init_frame_model(FrameArchitecture::standard(n, m, config), n, m, seed)
    }

    pub fn architecture(&self) -> FrameArchitecture {
        FrameArchitecture {
            f_net: self.f_net.spec.clone(),
            t_net: self.t_net.spec.clone(),
            sigma_net: self.sigma_net.as_ref().map(|s| s.spec.clone()),
            s_net: self.s_net.spec.clone(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Parameters in a fixed order shared with [`FrameModel::param_names`] and
    /// [`BoundFrame::vars`].
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = self.f_net.params();
        out.extend(self.t_net.params());
        if let Some(s) = &self.sigma_net {
            out.extend(s.params());
        }
        out.extend(self.s_net.params());
        out.push(&self.c);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.f_net.params_mut();
        out.extend(self.t_net.params_mut());
        if let Some(s) = &mut self.sigma_net {
            out.extend(s.params_mut());
        }
        out.extend(self.s_net.params_mut());
        out.push(&mut self.c);
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out = self.f_net.param_names("f_net");
        out.extend(self.t_net.param_names("t_net"));
        if let Some(s) = &self.sigma_net {
            out.extend(s.param_names("sigma_net"));
        }
        out.extend(self.s_net.param_names("s_net"));
        out.push("c".to_string());
        out
    }

    fn check_points(&self, x: &Tensor) -> Result<()> {
        if x.cols() != self.n {
            return Err(Error::Dimension(format!(
                "points have {} coordinates, model expects {}",
                x.cols(),
                self.n
            )));
        }
        if !x.is_finite() {
            return Err(Error::Numeric {
                primitive: "input".into(),
            });
        }
        Ok(())
    }

    /// `F`, `T` and `sigma` at every row of `x`.
    pub fn eval_fields(&self, x: &Tensor) -> Result<FieldValues> {
        self.check_points(x)?;
        let sigma = match &self.sigma_net {
            Some(net) => net.forward(x),
            None => Tensor::zeros(x.rows(), self.m),
        };
        Ok(FieldValues {
            n: self.n,
            m: self.m,
            f: self.f_net.forward(x),
            t: self.t_net.forward(x),
            sigma,
        })
    }

    /// `(u, du/dt)` of the interpolant at time `t` for every row of `x`.
    pub fn eval_interpolant(&self, t: f64, x: &Tensor) -> Result<(Tensor, Tensor)> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain {
                value: t,
                domain: "[0, 1]",
            });
        }
        self.check_points(x)?;
        let tape = Tape::new();
        let bound = self.bind_frozen(&tape);
        let tv = tape.constant(Tensor::filled(x.rows(), 1, t));
        let (u, du) = bound.interpolant(&tv, &tape.constant(x.clone()));
        let (mut u, du) = (u.value(), du.value());
        // pin the endpoints exactly
        if t == 0.0 {
            u = x.clone();
        } else if t == 1.0 {
            for r in 0..u.rows() {
                u.row_slice_mut(r).copy_from_slice(self.c.data());
            }
        }
        Ok((u, du))
    }

    /// `sum_j T_j F_j` at a single point.
    pub fn combined_velocity(&self, x: &[f64]) -> Vec<f64> {
        let fv = self
            .eval_fields(&Tensor::row(x))
            .expect("finite point of the right dimension");
        fv.combined(0)
    }

    pub fn bind(&self, tape: &Tape) -> BoundFrame {
        self.bind_with(tape, true)
    }

    pub fn bind_frozen(&self, tape: &Tape) -> BoundFrame {
        self.bind_with(tape, false)
    }

    fn bind_with(&self, tape: &Tape, trainable: bool) -> BoundFrame {
        let bind = |net: &Mlp| {
            if trainable {
                net.bind(tape)
            } else {
                net.bind_frozen(tape)
            }
        };
        BoundFrame {
            n: self.n,
            m: self.m,
            f: bind(&self.f_net),
            t: bind(&self.t_net),
            sigma: self.sigma_net.as_ref().map(bind),
            s: bind(&self.s_net),
            c: if trainable {
                tape.var(self.c.clone())
            } else {
                tape.constant(self.c.clone())
            },
        }
    }

    /// Field `j` as a differentiable map, for use with the autodiff helpers.
    pub fn field_map(&self, j: usize) -> impl Fn(&Dual) -> Dual + '_ {
        move |x: &Dual| {
            let b = self.f_net.bind_frozen(x.primal.tape());
            b.forward(x).slice_cols(j * self.n, self.n)
        }
    }

    /// Time function `j` as a differentiable map.
    pub fn time_map(&self, j: usize) -> impl Fn(&Dual) -> Dual + '_ {
        move |x: &Dual| {
            self.t_net
                .bind_frozen(x.primal.tape())
                .forward(x)
                .slice_cols(j, 1)
        }
    }
}

/// A [`FrameModel`] whose parameters live on a tape.
#[derive(Clone)]
pub struct BoundFrame {
    pub n: usize,
    pub m: usize,
    pub f: BoundMlp,
    pub t: BoundMlp,
    pub sigma: Option<BoundMlp>,
    pub s: BoundMlp,
    pub c: Var,
}

impl BoundFrame {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = self.f.vars();
        out.extend(self.t.vars());
        if let Some(s) = &self.sigma {
            out.extend(s.vars());
        }
        out.extend(self.s.vars());
        out.push(self.c.clone());
        out
    }

    /// `u = (1 - t) x + t C + t (1 - t) s(t, x)` and its time derivative, for a
    /// `rows x 1` column of times.
    pub fn interpolant(&self, t: &Var, x: &Var) -> (Var, Var) {
        let [rows, _] = x.shape();
        let input = Var::concat(&[t.clone(), x.clone()]);
        let mut seed = Tensor::zeros(rows, self.n + 1);
        for r in 0..rows {
            seed.set(r, 0, 1.0);
        }
        let s = self
            .s
            .forward(&Dual::new(input.clone(), vec![input.constant_like(seed)]));
        let (s_val, ds_dt) = (
            s.primal,
            s.tangents.into_iter().next().expect("one tangent"),
        );
        let one_minus_t = (-t).add_scalar(1.0);
        let bump = t * &one_minus_t;
        let u = &(&x.mul_col(&one_minus_t) + &t.matmul(&self.c)) + &s_val.mul_col(&bump);
        let slope = t.scale(-2.0).add_scalar(1.0);
        let du = (&(&s_val.mul_col(&slope) + &ds_dt.mul_col(&bump)) - x).add_row(&self.c);
        (u, du)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_more_fields_than_dimensions() {
        let err = FrameModel::new(&FrameConfig::default(), 2, 3, 0).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn interpolant_rejects_times_outside_unit_interval() {
        let model = FrameModel::new(&FrameConfig::default(), 2, 1, 0).unwrap();
        let err = model
            .eval_interpolant(1.5, &Tensor::row(&[0.0, 0.0]))
            .unwrap_err();
        assert!(matches!(err, Error::Domain { .. }));
    }

    #[test]
    fn parameter_order_is_consistent() {
        let config = FrameConfig {
            sigma_net: true,
            ..FrameConfig::default()
        };
        let model = FrameModel::new(&config, 3, 2, 5).unwrap();
        let tape = Tape::new();
        let vars = model.bind(&tape).vars();
        let params = model.params();
        assert_eq!(vars.len(), params.len());
        assert_eq!(model.param_names().len(), params.len());
        for (v, p) in vars.iter().zip(params) {
            assert_eq!(&v.value(), p);
        }
    }
}
