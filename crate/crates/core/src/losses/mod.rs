//! The training objective: flow matching plus four geometric regularizers.
//!
//! All terms are assembled row-wise on a tape so that one reverse sweep yields
//! the gradient of the batch mean with respect to every model parameter.

use crate::autodiff::{Dual, Tape, Var};
use crate::error::{Error, Result};
use crate::models::{BoundFrame, FrameModel, Head};
use crate::seeding;
use crate::spectral::lanczos::rademacher;
use crate::spectral::{
    lanczos_rows, Estimator, Penalty, ScalarFn, SpectralFn, SpectralPenaltySpec,
};
use crate::tensor::Tensor;

/// Floor on `|F_j|` and `|grad T_i|` inside the time-regularizer scaling.
pub const NORM_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub zeta: f64,
    pub eta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            zeta: 1.0,
            eta: 0.0,
        }
    }
}

/// How the scaling matrix `S` meets `JT F + I` in the time regularizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TimeScaling {
    /// Matrix product `S (JT F + I)`.
    Product,
    /// Entrywise product, pairing `S_ij` with `<grad T_i, F_j>`.
    #[default]
    Entrywise,
}

impl TimeScaling {
    pub fn name(self) -> &'static str {
        match self {
            TimeScaling::Product => "product",
            TimeScaling::Entrywise => "entrywise",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "product" => Some(TimeScaling::Product),
            "entrywise" => Some(TimeScaling::Entrywise),
            _ => None,
        }
    }
}

/// Tolerances of the batched on-tape flow integration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TapeIntegration {
    pub rtol: f64,
    pub atol: f64,
    /// Accepted plus rejected steps allowed per flow.
    pub max_steps: usize,
    /// States per flow, besides the start, at which the spectral penalty is
    /// also evaluated.
    pub path_points: usize,
}

impl Default for TapeIntegration {
    fn default() -> Self {
        Self {
            rtol: 1e-5,
            atol: 1e-7,
            max_steps: 400,
            path_points: 8,
        }
    }
}

/// What the data term measures.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum Objective {
    /// `|sum_j T_j F_j - d/dt s|^2` at a sampled interpolation time.
    #[default]
    FlowMatching,
    /// `|C - phi_m o ... o phi_1(x)|^2`, each flow run for `T_i` by adaptive
    /// Dormand-Prince steps recorded on the tape.
    Integrated(TapeIntegration),
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::FlowMatching => "flow-matching",
            Objective::Integrated(_) => "integrated",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub penalty: SpectralPenaltySpec,
    pub time_scaling: TimeScaling,
    pub objective: Objective,
}

/// Batch means of each term.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_c: f64,
    pub r_lambda: f64,
    pub r_commute: f64,
    pub r_time: f64,
    pub r_metric: f64,
    pub weights: LossWeights,
    pub total: f64,
    /// Field index sampled for each row.
    pub fields: Vec<usize>,
    /// Interpolation time sampled for each row.
    pub times: Vec<f64>,
}

impl LossBreakdown {
    pub fn weighted_sum(&self) -> f64 {
        let w = &self.weights;
        self.l_c
            + w.alpha * self.r_lambda
            + w.beta * self.r_commute
            + w.zeta * self.r_time
            + w.eta * self.r_metric
    }
}

/// Per-row draw of Algorithm-style sampling.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sample {
    pub field: usize,
    pub time: f64,
    pub seed: u64,
}

pub fn draw_samples(seeds: &[u64], m: usize) -> Vec<Sample> {
    seeds
        .iter()
        .map(|&seed| {
            let (field, time) = seeding::field_and_time(seed, m);
            Sample { field, time, seed }
        })
        .collect()
}

/// Per-row values of every term, each `rows x 1`.
pub struct TapeTerms {
    pub l_c: Var,
    pub r_lambda: Var,
    pub r_commute: Var,
    pub r_time: Var,
    pub r_metric: Var,
}

/// Fields, times and their spatial derivatives at a batch of points.
struct Geometry {
    n: usize,
    m: usize,
    z: Var,
    f: Var,
    t: Var,
    /// `df[k] = dF / dz_k`, `rows x (n m)`
    df: Vec<Var>,
    /// `dt[k] = dT / dz_k`, `rows x m`
    dt: Vec<Var>,
    /// `<grad sigma_j, F_j>`, `rows x m`
    sigma_rate: Option<Var>,
}

impl Geometry {
    fn new(bound: &BoundFrame, z: &Var) -> Self {
        let (n, m) = (bound.n, bound.m);
        let zd = Dual::with_basis(z.clone());
        let f = bound.f.forward(&zd);
        let t = bound.t.forward(&zd);
        let sigma_rate = bound.sigma.as_ref().map(|s| {
            let sd = s.forward(&zd);
            let cols: Vec<Var> = (0..m)
                .map(|j| sum_all((0..n).map(|k| &sd.tangents[k].col(j) * &f.primal.col(j * n + k))))
                .collect();
            Var::concat(&cols)
        });
        Self {
            n,
            m,
            z: z.clone(),
            f: f.primal,
            t: t.primal,
            df: f.tangents,
            dt: t.tangents,
            sigma_rate,
        }
    }

    fn rows(&self) -> usize {
        self.f.rows()
    }

    fn field(&self, j: usize) -> Var {
        self.f.slice_cols(j * self.n, self.n)
    }

    fn fcol(&self, j: usize, k: usize) -> Var {
        self.f.col(j * self.n + k)
    }

    fn zeros(&self) -> Var {
        self.f.constant_like(Tensor::zeros(self.rows(), 1))
    }

    /// `J_{F_j} F_i` for every row.
    fn jac_times(&self, j: usize, i: usize) -> Var {
        sum_all((0..self.n).map(|k| {
            self.df[k]
                .slice_cols(j * self.n, self.n)
                .mul_col(&self.fcol(i, k))
        }))
    }

    /// `sum_j T_j F_j`
    fn combined(&self) -> Var {
        sum_all((0..self.m).map(|j| self.field(j).mul_col(&self.t.col(j))))
    }

    fn commute(&self) -> Var {
        let mut terms = Vec::new();
        for i in 0..self.m {
            for j in i + 1..self.m {
                let bracket = &self.jac_times(j, i) - &self.jac_times(i, j);
                let weight = &self.t.col(i) * &self.t.col(j);
                terms.push((&bracket.square().sum_cols() * &weight).scale(2.0));
            }
        }
        if terms.is_empty() {
            self.zeros()
        } else {
            sum_all(terms)
        }
    }

    fn time(&self, scaling: TimeScaling) -> Var {
        let (n, m) = (self.n, self.m);
        let grad_t = |i: usize, k: usize| self.dt[k].col(i);
        let mut mp = vec![Vec::with_capacity(m); m];
        for (i, row) in mp.iter_mut().enumerate() {
            for j in 0..m {
                let e = sum_all((0..n).map(|k| &grad_t(i, k) * &self.fcol(j, k)));
                row.push(if i == j { e.add_scalar(1.0) } else { e });
            }
        }
        let grad_norm: Vec<Var> = (0..m)
            .map(|i| {
                sum_all((0..n).map(|k| grad_t(i, k).square()))
                    .add_scalar(1e-300)
                    .sqrt()
                    .clamp_min(NORM_FLOOR)
            })
            .collect();
        let field_norm: Vec<Var> = (0..m)
            .map(|j| {
                self.field(j)
                    .square()
                    .sum_cols()
                    .add_scalar(1e-300)
                    .sqrt()
                    .clamp_min(NORM_FLOOR)
            })
            .collect();
        let mut out = Vec::with_capacity(m * m);
        for i in 0..m {
            for j in 0..m {
                let scaled = |l: usize| {
                    if l == i {
                        mp[l][j].clone()
                    } else {
                        &mp[l][j] * &(&field_norm[l] * &grad_norm[i]).recip()
                    }
                };
                let entry = match scaling {
                    TimeScaling::Product => sum_all((0..m).map(scaled)),
                    TimeScaling::Entrywise => {
                        if i == j {
                            mp[i][j].clone()
                        } else {
                            &mp[i][j] * &(&field_norm[j] * &grad_norm[i]).recip()
                        }
                    }
                };
                out.push(entry.square());
            }
        }
        sum_all(out)
    }

    fn metric(&self, fields: &[usize]) -> Var {
        match &self.sigma_rate {
            Some(rate) => (&pick(rate, fields) * &pick(&self.t, fields))
                .square()
                .scale(self.m as f64),
            None => self.zeros(),
        }
    }

    fn signs(&self, fields: &[usize], signed: bool) -> Vec<f64> {
        let t = self.t.value();
        (0..self.rows())
            .map(|r| {
                if signed && t.get(r, fields[r]) < 0.0 {
                    -1.0
                } else {
                    1.0
                }
            })
            .collect()
    }

    fn conformal(&self, fields: &[usize]) -> Option<Var> {
        self.sigma_rate.as_ref().map(|rate| pick(rate, fields))
    }

    /// Row-wise `A = sign (J + J^T + c I)` flattened to `rows x n^2`.
    fn lie_matrix(&self, fields: &[usize], signed: bool) -> Var {
        let (n, m) = (self.n, self.m);
        let rows = self.rows();
        let nm = (n * m) as u32;
        let mut direct = Vec::with_capacity(rows * n * n);
        let mut transposed = Vec::with_capacity(rows * n * n);
        for (r, &i) in fields.iter().enumerate() {
            let base = r as u32 * nm + (i * n) as u32;
            for a in 0..n {
                for b in 0..n {
                    direct.push((b as u32, base + a as u32));
                    transposed.push((a as u32, base + b as u32));
                }
            }
        }
        let j = Var::gather(&self.df, rows, n * n, direct);
        let jt = Var::gather(&self.df, rows, n * n, transposed);
        let mut a = &j + &jt;
        if let Some(c) = self.conformal(fields) {
            let mut diag = Tensor::zeros(1, n * n);
            for k in 0..n {
                diag.set(0, k * n + k, 1.0);
            }
            a = &a + &c.matmul(&c.constant_like(diag));
        }
        if signed {
            a = a.mul_col(&a.constant_like(Tensor::column(&self.signs(fields, true))));
        }
        a
    }

    fn lambda(
        &self,
        bound: &BoundFrame,
        samples: &[Sample],
        spec: &SpectralPenaltySpec,
        signed: bool,
    ) -> Result<Var> {
        let fields: Vec<usize> = samples.iter().map(|s| s.field).collect();
        let t_i = pick(&self.t, &fields);
        Ok(&self.lambda_core(bound, samples, spec, signed)? * &t_i.square())
    }

    /// The spectral penalty before scaling by the squared flow time.
    fn lambda_core(
        &self,
        bound: &BoundFrame,
        samples: &[Sample],
        spec: &SpectralPenaltySpec,
        signed: bool,
    ) -> Result<Var> {
        let fields: Vec<usize> = samples.iter().map(|s| s.field).collect();
        let hinge = |s: &Var| (-s).clamp_min(0.0).square();
        let core = match spec.estimator {
            Estimator::ExactEigen => {
                let a = self.lie_matrix(&fields, signed);
                match spec.penalty {
                    Penalty::SoftMin => hinge(&a.spectral(self.n, SpectralFn::SoftMin)?),
                    Penalty::ReluSquared => {
                        a.spectral(self.n, SpectralFn::Trace(ScalarFn::NegReluSquared))?
                    }
                }
            }
            Estimator::Lanczos { steps, probes } => {
                let traces = |fs: &[ScalarFn]| {
                    self.matrix_free_traces(bound, samples, &fields, signed, steps, probes, fs)
                };
                match spec.penalty {
                    Penalty::SoftMin => {
                        let tr = traces(&[ScalarFn::LambdaNegExp, ScalarFn::NegExp])?;
                        hinge(&(&tr[0] * &tr[1].recip()))
                    }
                    Penalty::ReluSquared => traces(&[ScalarFn::NegReluSquared])?.remove(0),
                }
            }
        };
        Ok(core)
    }

    /// Hutchinson estimates of `tr v(A)` per row for each `v`, sharing probes
    /// and Krylov runs.
    #[allow(clippy::too_many_arguments)]
    fn matrix_free_traces(
        &self,
        bound: &BoundFrame,
        samples: &[Sample],
        fields: &[usize],
        signed: bool,
        steps: usize,
        probes: usize,
        fs: &[ScalarFn],
    ) -> Result<Vec<Var>> {
        let (n, m) = (self.n, self.m);
        let rows = self.rows();
        let big = rows * probes;
        let mut rep = Tensor::zeros(big, rows);
        let mut avg = Tensor::zeros(rows, big);
        let mut z = Tensor::zeros(big, n);
        for (b, s) in samples.iter().enumerate() {
            let mut rng = seeding::rng(seeding::stream_seed(s.seed, &[PROBE_STREAM]));
            for p in 0..probes {
                let r = b * probes + p;
                rep.set(r, b, 1.0);
                avg.set(b, r, 1.0 / probes as f64);
                z.row_slice_mut(r).copy_from_slice(&rademacher(&mut rng, n));
            }
        }
        let rep = self.z.constant_like(rep);
        let point = rep.matmul(&self.z);
        let row_field: Vec<usize> = (0..big).map(|r| fields[r / probes]).collect();
        let sign = self.z.constant_like(Tensor::column(
            &self
                .signs(fields, signed)
                .iter()
                .flat_map(|&s| std::iter::repeat_n(s, probes))
                .collect::<Vec<_>>(),
        ));
        let conformal = self.conformal(fields).map(|c| rep.matmul(&c));
        let nm = (n * m) as u32;
        let select: Vec<(u32, u32)> = row_field
            .iter()
            .enumerate()
            .flat_map(|(r, &i)| (0..n as u32).map(move |a| (0, r as u32 * nm + (i * n) as u32 + a)))
            .collect();
        let scatter: Vec<(u32, u32)> = row_field
            .iter()
            .enumerate()
            .flat_map(|(r, &i)| {
                (0..n * m).map(move |c| {
                    if c / n == i {
                        (0, (r * n + c % n) as u32)
                    } else {
                        (1, 0)
                    }
                })
            })
            .collect();
        let zero = self.z.constant_like(Tensor::zeros(1, 1));
        let matvec = |q: &Var| {
            let jv_full = bound
                .f
                .forward(&Dual::new(point.clone(), vec![q.clone()]))
                .tangents
                .remove(0);
            let jv = Var::gather(&[jv_full], big, n, select.clone());
            let cot = Var::gather(&[q.clone(), zero.clone()], big, n * m, scatter.clone());
            let jtv = bound.f.vjp(&point, &cot);
            let mut out = &jv + &jtv;
            if let Some(c) = &conformal {
                out = &out + &q.mul_col(c);
            }
            out.mul_col(&sign)
        };
        let start = self.z.constant_like(z);
        let (alpha, beta, sizes) = lanczos_rows(&matvec, &start, steps);
        let avg = self.z.constant_like(avg);
        fs.iter()
            .map(|&f| {
                let q = Var::lanczos_quadrature(&alpha, &beta, &sizes, f)?;
                Ok(avg.matmul(&q.scale(n as f64)))
            })
            .collect()
    }
}

const PROBE_STREAM: u64 = 0x70726f6265;

fn sum_all(terms: impl IntoIterator<Item = Var>) -> Var {
    let mut it = terms.into_iter();
    let first = it.next().expect("at least one term");
    it.fold(first, |acc, t| &acc + &t)
}

/// Entry `idx[r]` of each row, as a column.
fn pick(v: &Var, idx: &[usize]) -> Var {
    let cols = v.cols() as u32;
    let map = idx
        .iter()
        .enumerate()
        .map(|(r, &i)| (0, r as u32 * cols + i as u32))
        .collect();
    Var::gather(std::slice::from_ref(v), idx.len(), 1, map)
}

fn is_signed(bound: &BoundFrame) -> bool {
    matches!(bound.t.spec.head, Head::Identity)
}

/// Regularizers at the points `z` (one row each).
pub fn regularizers_on_tape(
    bound: &BoundFrame,
    z: &Var,
    samples: &[Sample],
    config: &LossConfig,
) -> Result<(Var, Var, Var, Var)> {
    config.penalty.validate(bound.n)?;
    let g = Geometry::new(bound, z);
    let fields: Vec<usize> = samples.iter().map(|s| s.field).collect();
    let r_lambda = g.lambda(bound, samples, &config.penalty, is_signed(bound))?;
    Ok((
        r_lambda,
        g.commute(),
        g.time(config.time_scaling),
        g.metric(&fields),
    ))
}

/// Every term for a batch `x` with per-row samples.
pub fn terms_on_tape(
    bound: &BoundFrame,
    x: &Var,
    samples: &[Sample],
    config: &LossConfig,
) -> Result<TapeTerms> {
    config.penalty.validate(bound.n)?;
    if samples.len() != x.rows() {
        return Err(Error::shape(
            "terms_on_tape",
            format!("{} samples for {} points", samples.len(), x.rows()),
        ));
    }
    let t = x.constant_like(Tensor::column(
        &samples.iter().map(|s| s.time).collect::<Vec<_>>(),
    ));
    let (u, du) = bound.interpolant(&t, x);
    let g = Geometry::new(bound, &u);
    let l_c = (&g.combined() - &du).square().sum_cols();
    let fields: Vec<usize> = samples.iter().map(|s| s.field).collect();
    let r_lambda = g.lambda(bound, samples, &config.penalty, is_signed(bound))?;
    Ok(TapeTerms {
        l_c,
        r_lambda,
        r_commute: g.commute(),
        r_time: g.time(config.time_scaling),
        r_metric: g.metric(&fields),
    })
}

/// Sequential composition of the learned flows started at `x`. Each flow
/// runs for `T_i` evaluated where it starts; the step sizes are shared by the
/// batch and held constant under differentiation.
pub fn composed_flow_on_tape(bound: &BoundFrame, x: &Var, opts: &TapeIntegration) -> Result<Var> {
    Ok(composed_flow_with_path(bound, x, opts)?.0)
}

/// Fourth-order continuous extension of an accepted Dormand-Prince step at
/// `theta` in `[0, 1]`; `ks` holds stages 1, 3, 4, 5, 6 and 7.
fn dense_output(y0: &Var, y1: &Var, ks: &[&Var; 6], h: f64, theta: f64) -> Var {
    const D: [f64; 6] = [
        -12715105075.0 / 11282082432.0,
        87487479700.0 / 32700410799.0,
        -10690763975.0 / 1880347072.0,
        701980252875.0 / 199316789632.0,
        -1453857185.0 / 822651844.0,
        69997945.0 / 29380423.0,
    ];
    let r2 = y1 - y0;
    let r3 = &ks[0].scale(h) - &r2;
    let r4 = &(&r2 - &ks[5].scale(h)) - &r3;
    let r5 = sum_all(ks.iter().zip(D).map(|(k, d)| k.scale(h * d)));
    let u = 1.0 - theta;
    let inner = &r4 + &r5.scale(u);
    let mid = &r3 + &inner.scale(theta);
    let outer = &r2 + &mid.scale(u);
    y0 + &outer.scale(theta)
}

/// The composed flow endpoint, the time each flow runs for, and for each flow
/// the states at `path_points` evenly spaced fractions of its duration.
fn composed_flow_with_path(
    bound: &BoundFrame,
    x: &Var,
    opts: &TapeIntegration,
) -> Result<(Var, Vec<Var>, Vec<Vec<Var>>)> {
    use crate::geometry::ode::*;
    let n = bound.n;
    let mut z = x.clone();
    let mut taus = Vec::with_capacity(bound.m);
    let mut path = Vec::with_capacity(bound.m);
    for i in 0..bound.m {
        let targets: Vec<f64> = (1..=opts.path_points)
            .map(|p| p as f64 / (opts.path_points + 1) as f64)
            .collect();
        let mut states = Vec::with_capacity(targets.len());
        let tau = bound.t.forward(&Dual::constant(z.clone())).primal.col(i);
        let v = |p: &Var| {
            bound
                .f
                .forward(&Dual::constant(p.clone()))
                .primal
                .slice_cols(i * n, n)
                .mul_col(&tau)
        };
        let lin = |terms: &[(f64, &Var)]| sum_all(terms.iter().map(|(c, k)| k.scale(*c)));
        let (mut s, mut h, mut tries) = (0.0f64, 0.1f64, 0usize);
        let mut k1 = v(&z);
        while s < 1.0 {
            tries += 1;
            if tries > opts.max_steps {
                return Err(Error::StepBudget {
                    steps: opts.max_steps,
                });
            }
            h = h.min(1.0 - s);
            let k2 = v(&(&z + &lin(&[(h * A21, &k1)])));
            let k3 = v(&(&z + &lin(&[(h * A31, &k1), (h * A32, &k2)])));
            let k4 = v(&(&z + &lin(&[(h * A41, &k1), (h * A42, &k2), (h * A43, &k3)])));
            let k5 = v(&(&z
                + &lin(&[
                    (h * A51, &k1),
                    (h * A52, &k2),
                    (h * A53, &k3),
                    (h * A54, &k4),
                ])));
            let k6 = v(&(&z
                + &lin(&[
                    (h * A61, &k1),
                    (h * A62, &k2),
                    (h * A63, &k3),
                    (h * A64, &k4),
                    (h * A65, &k5),
                ])));
            let next = &z
                + &lin(&[
                    (h * B1, &k1),
                    (h * B3, &k3),
                    (h * B4, &k4),
                    (h * B5, &k5),
                    (h * B6, &k6),
                ]);
            let k7 = v(&next);
            let err = lin(&[
                (h * E1, &k1),
                (h * E3, &k3),
                (h * E4, &k4),
                (h * E5, &k5),
                (h * E6, &k6),
                (h * E7, &k7),
            ])
            .value();
            let (y0, y1) = (z.value(), next.value());
            let mut worst: f64 = 0.0;
            for r in 0..y0.rows() {
                let mut acc = 0.0;
                for c in 0..n {
                    let scale = opts.atol + opts.rtol * y0.get(r, c).abs().max(y1.get(r, c).abs());
                    acc += (err.get(r, c) / scale).powi(2);
                }
                worst = worst.max((acc / n as f64).sqrt());
            }
            if !worst.is_finite() {
                return Err(Error::Numeric {
                    primitive: "composed_flow_on_tape".into(),
                });
            }
            if worst <= 1.0 {
                let ks = [&k1, &k3, &k4, &k5, &k6, &k7];
                while states.len() < targets.len() && targets[states.len()] <= s + h {
                    let theta = (targets[states.len()] - s) / h;
                    states.push(dense_output(&z, &next, &ks, h, theta));
                }
                s += h;
                z = next;
                k1 = k7;
            }
            h *= (0.9 * worst.max(1e-10).powf(-0.2)).clamp(0.2, 5.0);
        }
        path.push(states);
        taus.push(tau);
    }
    Ok((z, taus, path))
}

/// Terms of the integrated objective: the collapse residual and the spectral
/// penalty summed over every field at `x`.
pub fn integrated_terms_on_tape(
    bound: &BoundFrame,
    x: &Var,
    samples: &[Sample],
    config: &LossConfig,
    opts: &TapeIntegration,
) -> Result<TapeTerms> {
    config.penalty.validate(bound.n)?;
    let (end, taus, path) = composed_flow_with_path(bound, x, opts)?;
    let l_c = end.add_row(&bound.c.scale(-1.0)).square().sum_cols();
    let rows = x.rows();
    let zero = x.constant_like(Tensor::zeros(rows, 1));
    let r_lambda = if config.weights.alpha != 0.0 {
        let signed = is_signed(bound);
        let at = |z: &Var, k: usize| -> Result<Var> {
            let s: Vec<Sample> = samples.iter().map(|s| Sample { field: k, ..*s }).collect();
            let core = Geometry::new(bound, z).lambda_core(bound, &s, &config.penalty, signed)?;
            Ok(&core * &taus[k].square())
        };
        let mut parts = Vec::new();
        for k in 0..bound.m {
            parts.push(at(x, k)?);
            for state in &path[k] {
                parts.push(at(state, k)?);
            }
        }
        let count = parts.len() as f64;
        sum_all(parts).scale(bound.m as f64 / count)
    } else {
        zero.clone()
    };
    Ok(TapeTerms {
        l_c,
        r_lambda,
        r_commute: zero.clone(),
        r_time: zero.clone(),
        r_metric: zero,
    })
}

fn objective_terms(
    bound: &BoundFrame,
    x: &Var,
    samples: &[Sample],
    config: &LossConfig,
) -> Result<TapeTerms> {
    match config.objective {
        Objective::FlowMatching => terms_on_tape(bound, x, samples, config),
        Objective::Integrated(opts) => integrated_terms_on_tape(bound, x, samples, config, &opts),
    }
}

/// Weighted batch mean; terms with zero weight stay off the gradient path.
pub fn total_on_tape(terms: &TapeTerms, weights: &LossWeights) -> Var {
    let mut total = terms.l_c.clone();
    for (w, term) in [
        (weights.alpha, &terms.r_lambda),
        (weights.beta, &terms.r_commute),
        (weights.zeta, &terms.r_time),
        (weights.eta, &terms.r_metric),
    ] {
        if w != 0.0 {
            total = &total + &term.scale(w);
        }
    }
    total.mean()
}

fn check_points(model: &FrameModel, x: &Tensor, seeds: &[u64]) -> Result<()> {
    if x.rows() == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    if x.cols() != model.n {
        return Err(Error::Dimension(format!(
            "points have {} coordinates, model expects {}",
            x.cols(),
            model.n
        )));
    }
    if seeds.len() != x.rows() {
        return Err(Error::shape(
            "batch_loss",
            format!("{} seeds for {} points", seeds.len(), x.rows()),
        ));
    }
    Ok(())
}

fn breakdown(terms: &TapeTerms, weights: LossWeights, samples: &[Sample]) -> Result<LossBreakdown> {
    let mean = |name: &str, v: &Var| {
        let m = v.with_value(|t| t.sum() / t.len() as f64);
        if m.is_finite() {
            Ok(m)
        } else {
            Err(Error::Numeric {
                primitive: name.to_string(),
            })
        }
    };
    let mut b = LossBreakdown {
        l_c: mean("l_c", &terms.l_c)?,
        r_lambda: mean("r_lambda", &terms.r_lambda)?,
        r_commute: mean("r_commute", &terms.r_commute)?,
        r_time: mean("r_time", &terms.r_time)?,
        r_metric: mean("r_metric", &terms.r_metric)?,
        weights,
        total: 0.0,
        fields: samples.iter().map(|s| s.field).collect(),
        times: samples.iter().map(|s| s.time).collect(),
    };
    b.total = b.weighted_sum();
    Ok(b)
}

/// Loss of a batch; row `r` draws its field and time from `seeds[r]`.
pub fn batch_loss(
    model: &FrameModel,
    x: &Tensor,
    seeds: &[u64],
    config: &LossConfig,
) -> Result<LossBreakdown> {
    check_points(model, x, seeds)?;
    let tape = Tape::new();
    let bound = model.bind_frozen(&tape);
    let samples = draw_samples(seeds, model.m);
    let terms = objective_terms(&bound, &tape.constant(x.clone()), &samples, config)?;
    breakdown(&terms, config.weights, &samples)
}

/// Loss and its gradient, ordered as [`FrameModel::params`].
pub fn batch_loss_and_grad(
    model: &FrameModel,
    x: &Tensor,
    seeds: &[u64],
    config: &LossConfig,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    check_points(model, x, seeds)?;
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let samples = draw_samples(seeds, model.m);
    let terms = objective_terms(&bound, &tape.constant(x.clone()), &samples, config)?;
    let b = breakdown(&terms, config.weights, &samples)?;
    let mut grads = total_on_tape(&terms, &config.weights).backward()?;
    Ok((b, bound.vars().iter().map(|v| grads.take(v)).collect()))
}

fn single_point(model: &FrameModel, z: &[f64]) -> Result<(Tape, BoundFrame, Var)> {
    let p = Tensor::row(z);
    if p.cols() != model.n {
        return Err(Error::Dimension(format!(
            "point has {} coordinates, model expects {}",
            p.cols(),
            model.n
        )));
    }
    if !p.is_finite() {
        return Err(Error::Numeric {
            primitive: "input".into(),
        });
    }
    let tape = Tape::new();
    let bound = model.bind_frozen(&tape);
    let zv = tape.constant(p);
    Ok((tape, bound, zv))
}

/// `|sum_i T_i(u) F_i(u) - du/dt|^2` at one point and time.
pub fn flow_matching_loss(model: &FrameModel, x: &[f64], t: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain {
            value: t,
            domain: "[0, 1]",
        });
    }
    let (_tape, bound, xv) = single_point(model, x)?;
    let tv = xv.constant_like(Tensor::scalar(t));
    let (u, du) = bound.interpolant(&tv, &xv);
    let g = Geometry::new(&bound, &u);
    (&g.combined() - &du).square().sum_cols().value().item()
}

/// `sum_{i != j} |[F_i, F_j](z)|^2 T_i(z) T_j(z)`
pub fn commute_regularizer(model: &FrameModel, z: &[f64]) -> Result<f64> {
    let (_tape, bound, zv) = single_point(model, z)?;
    Geometry::new(&bound, &zv).commute().value().item()
}

/// `|S (JT F + I)|_F^2`, with `S` applied as selected by `scaling`.
pub fn time_regularizer(model: &FrameModel, z: &[f64], scaling: TimeScaling) -> Result<f64> {
    let (_tape, bound, zv) = single_point(model, z)?;
    Geometry::new(&bound, &zv).time(scaling).value().item()
}

/// `m (<grad sigma_i, F_i> T_i)^2`
pub fn metric_regularizer(model: &FrameModel, z: &[f64], i: usize) -> Result<f64> {
    let (_tape, bound, zv) = single_point(model, z)?;
    if i >= model.m {
        return Err(Error::Contract(format!(
            "field index {i} out of range for m = {}",
            model.m
        )));
    }
    Geometry::new(&bound, &zv).metric(&[i]).value().item()
}

/// PSD penalty of field `i` at `z`; `seed` fixes the probes.
pub fn lambda_regularizer(
    model: &FrameModel,
    z: &[f64],
    i: usize,
    spec: &SpectralPenaltySpec,
    seed: u64,
) -> Result<f64> {
    let (_tape, bound, zv) = single_point(model, z)?;
    if i >= model.m {
        return Err(Error::Contract(format!(
            "field index {i} out of range for m = {}",
            model.m
        )));
    }
    spec.validate(model.n)?;
    let sample = Sample {
        field: i,
        time: 0.0,
        seed,
    };
    Geometry::new(&bound, &zv)
        .lambda(&bound, &[sample], spec, is_signed(&bound))?
        .value()
        .item()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::FrameConfig;

    fn small(sigma: bool) -> FrameModel {
        let config = FrameConfig {
            hidden: vec![6, 6],
            sigma_net: sigma,
            field_radius: 0.5,
            ..FrameConfig::default()
        };
        FrameModel::new(&config, 3, 2, 5).unwrap()
    }

    fn points() -> Tensor {
        Tensor::from_rows(&[
            vec![0.3, -0.2, 0.5],
            vec![-0.4, 0.1, 0.2],
            vec![0.05, 0.6, -0.3],
        ])
        .unwrap()
    }

    #[test]
    fn batch_rows_match_pointwise() {
        let model = small(true);
        let x = points();
        let seeds = [11, 12, 13];
        let config = LossConfig {
            weights: LossWeights {
                eta: 1.0,
                ..LossWeights::default()
            },
            ..LossConfig::default()
        };
        let b = batch_loss(&model, &x, &seeds, &config).unwrap();
        let mut l_c = 0.0;
        for (r, s) in draw_samples(&seeds, 2).iter().enumerate() {
            l_c += flow_matching_loss(&model, x.row_slice(r), s.time).unwrap() / 3.0;
        }
        assert!((b.l_c - l_c).abs() < 1e-12 * l_c.max(1.0));
        assert!((b.total - b.weighted_sum()).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let x = points();
        let seeds = [1, 2, 3];
        for estimator in [
            Estimator::ExactEigen,
            Estimator::Lanczos {
                steps: 3,
                probes: 2,
            },
        ] {
            let model = small(true);
            let config = LossConfig {
                weights: LossWeights {
                    eta: 1.0,
                    alpha: 50.0,
                    ..LossWeights::default()
                },
                penalty: SpectralPenaltySpec {
                    penalty: Penalty::SoftMin,
                    estimator,
                },
                time_scaling: TimeScaling::Entrywise,
                objective: Objective::FlowMatching,
            };
            let (_, grads) = batch_loss_and_grad(&model, &x, &seeds, &config).unwrap();
            for (p, g) in grads.iter().enumerate() {
                for idx in [0, g.len() / 2, g.len() - 1] {
                    let h = 1e-5;
                    let eval = |d: f64| {
                        let mut mm = model.clone();
                        mm.params_mut()[p].data_mut()[idx] += d;
                        batch_loss(&mm, &x, &seeds, &config).unwrap().total
                    };
                    let fd = (eval(h) - eval(-h)) / (2.0 * h);
                    let an = g.data()[idx];
                    assert!(
                        (fd - an).abs() < 1e-5 * (1.0 + an.abs()),
                        "{estimator:?} param {p}[{idx}]: {an} vs {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn integrated_gradient_matches_finite_differences() {
        let model = small(false);
        let x = points();
        let seeds = [1, 2, 3];
        let config = LossConfig {
            penalty: SpectralPenaltySpec {
                penalty: Penalty::ReluSquared,
                estimator: Estimator::ExactEigen,
            },
            objective: Objective::Integrated(TapeIntegration {
                rtol: 1e-9,
                atol: 1e-11,
                ..TapeIntegration::default()
            }),
            weights: LossWeights {
                alpha: 1.0,
                ..LossWeights::default()
            },
            ..LossConfig::default()
        };
        let (b, grads) = batch_loss_and_grad(&model, &x, &seeds, &config).unwrap();
        assert_eq!((b.r_commute, b.r_time, b.r_metric), (0.0, 0.0, 0.0));
        for (p, g) in grads.iter().enumerate() {
            for idx in [0, g.len() - 1] {
                let h = 1e-6;
                let eval = |d: f64| {
                    let mut mm = model.clone();
                    mm.params_mut()[p].data_mut()[idx] += d;
                    batch_loss(&mm, &x, &seeds, &config).unwrap().total
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = g.data()[idx];
                assert!(
                    (fd - an).abs() < 1e-5 * (1.0 + an.abs()),
                    "param {p}[{idx}]: {an} vs {fd}"
                );
            }
        }
    }
}
