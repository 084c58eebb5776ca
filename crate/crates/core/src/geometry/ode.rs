//! Adaptive Dormand-Prince 5(4) integration of autonomous vector fields with
//! accumulated arc length.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct FlowOptions {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    pub min_step: f64,
    /// Upper bound on the integration time when stopping on a small velocity.
    pub max_time: f64,
}

impl Default for FlowOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-8,
            atol: 1e-8,
            max_steps: 1_000_000,
            min_step: 1e-14,
            max_time: 100.0,
        }
    }
}

impl FlowOptions {
    pub fn with_tolerances(rtol: f64, atol: f64) -> Self {
        Self {
            rtol,
            atol,
            ..Self::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    pub h: f64,
    /// Scaled error norm; the step is accepted when it is at most one.
    pub error: f64,
    pub accepted: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    /// Reached the requested end time.
    EndTime,
    /// Velocity dropped below the stationary threshold.
    Stationary,
    /// Hit `max_time` before becoming stationary.
    TimeLimit,
}

#[derive(Clone, Debug)]
pub struct FlowTrace {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// `int_0^t |F(x(s))| ds` at each time of the grid.
    pub arc_length: Vec<f64>,
    pub steps: Vec<StepRecord>,
    pub stop: StopReason,
}

impl FlowTrace {
    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("trace holds the initial state")
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().expect("trace holds the initial time")
    }

    pub fn total_arc_length(&self) -> f64 {
        *self
            .arc_length
            .last()
            .expect("trace holds the initial arc length")
    }

    pub fn rejected_steps(&self) -> usize {
        self.steps.iter().filter(|s| !s.accepted).count()
    }
}

pub(crate) const A21: f64 = 1.0 / 5.0;
pub(crate) const A31: f64 = 3.0 / 40.0;
pub(crate) const A32: f64 = 9.0 / 40.0;
pub(crate) const A41: f64 = 44.0 / 45.0;
pub(crate) const A42: f64 = -56.0 / 15.0;
pub(crate) const A43: f64 = 32.0 / 9.0;
pub(crate) const A51: f64 = 19372.0 / 6561.0;
pub(crate) const A52: f64 = -25360.0 / 2187.0;
pub(crate) const A53: f64 = 64448.0 / 6561.0;
pub(crate) const A54: f64 = -212.0 / 729.0;
pub(crate) const A61: f64 = 9017.0 / 3168.0;
pub(crate) const A62: f64 = -355.0 / 33.0;
pub(crate) const A63: f64 = 46732.0 / 5247.0;
pub(crate) const A64: f64 = 49.0 / 176.0;
pub(crate) const A65: f64 = -5103.0 / 18656.0;
pub(crate) const B1: f64 = 35.0 / 384.0;
pub(crate) const B3: f64 = 500.0 / 1113.0;
pub(crate) const B4: f64 = 125.0 / 192.0;
pub(crate) const B5: f64 = -2187.0 / 6784.0;
pub(crate) const B6: f64 = 11.0 / 84.0;
pub(crate) const E1: f64 = 71.0 / 57600.0;
pub(crate) const E3: f64 = -71.0 / 16695.0;
pub(crate) const E4: f64 = 71.0 / 1920.0;
pub(crate) const E5: f64 = -17253.0 / 339200.0;
pub(crate) const E6: f64 = 22.0 / 525.0;
pub(crate) const E7: f64 = -1.0 / 40.0;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// State augmented with the arc length as the last component.
struct Augmented<'a, F: Fn(&[f64]) -> Vec<f64>> {
    field: &'a F,
    n: usize,
}

impl<F: Fn(&[f64]) -> Vec<f64>> Augmented<'_, F> {
    fn eval(&self, y: &[f64]) -> Vec<f64> {
        let mut v = (self.field)(&y[..self.n]);
        assert_eq!(v.len(), self.n, "field must preserve dimension");
        let speed = norm(&v);
        v.push(speed);
        v
    }
}

fn combine(y: &[f64], h: f64, terms: &[(f64, &[f64])]) -> Vec<f64> {
    let mut out = y.to_vec();
    for (c, k) in terms {
        if *c != 0.0 {
            out.iter_mut()
                .zip(k.iter())
                .for_each(|(o, ki)| *o += h * c * ki);
        }
    }
    out
}

fn initial_step(f: &impl Fn(&[f64]) -> Vec<f64>, y: &[f64], f0: &[f64], opts: &FlowOptions) -> f64 {
    let scale: Vec<f64> = y.iter().map(|v| opts.atol + opts.rtol * v.abs()).collect();
    let rms = |v: &[f64]| {
        (v.iter()
            .zip(&scale)
            .map(|(a, s)| (a / s).powi(2))
            .sum::<f64>()
            / v.len() as f64)
            .sqrt()
    };
    let (d0, d1) = (rms(y), rms(f0));
    let h0 = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    };
    let y1 = combine(y, h0, &[(1.0, f0)]);
    let f1 = f(&y1);
    let diff: Vec<f64> = f1.iter().zip(f0).map(|(a, b)| a - b).collect();
    let d2 = rms(&diff) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    (100.0 * h0).min(h1)
}

enum Stop {
    At(f64),
    Stationary { threshold: f64, max_time: f64 },
}

fn run<F: Fn(&[f64]) -> Vec<f64>>(
    field: &F,
    x0: &[f64],
    stop: Stop,
    opts: &FlowOptions,
) -> Result<FlowTrace> {
    let n = x0.len();
    let aug = Augmented { field, n };
    let f = |y: &[f64]| aug.eval(y);
    let mut y: Vec<f64> = x0.iter().copied().chain([0.0]).collect();
    let mut t = 0.0;
    let mut trace = FlowTrace {
        times: vec![0.0],
        states: vec![x0.to_vec()],
        arc_length: vec![0.0],
        steps: Vec::new(),
        stop: StopReason::EndTime,
    };
    let mut k1 = f(&y);
    let end = match stop {
        Stop::At(t_end) => t_end,
        Stop::Stationary {
            threshold,
            max_time,
        } => {
            if norm(&k1[..n]) < threshold {
                trace.stop = StopReason::Stationary;
                return Ok(trace);
            }
            max_time
        }
    };
    if end <= 0.0 {
        return Ok(trace);
    }
    let mut h = initial_step(&f, &y, &k1, opts).min(end);
    let mut attempts = 0usize;
    loop {
        if attempts >= opts.max_steps {
            return Err(Error::StepBudget {
                steps: opts.max_steps,
            });
        }
        attempts += 1;
        let last = t + h >= end;
        if last {
            h = end - t;
        }
        let k2 = f(&combine(&y, h, &[(A21, &k1)]));
        let k3 = f(&combine(&y, h, &[(A31, &k1), (A32, &k2)]));
        let k4 = f(&combine(&y, h, &[(A41, &k1), (A42, &k2), (A43, &k3)]));
        let k5 = f(&combine(
            &y,
            h,
            &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)],
        ));
        let k6 = f(&combine(
            &y,
            h,
            &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)],
        ));
        let y_new = combine(
            &y,
            h,
            &[(B1, &k1), (B3, &k3), (B4, &k4), (B5, &k5), (B6, &k6)],
        );
        let k7 = f(&y_new);
        let mut err = 0.0f64;
        for i in 0..=n {
            let e =
                h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            let sc = opts.atol + opts.rtol * y[i].abs().max(y_new[i].abs());
            err = err.max((e / sc).abs());
        }
        if !err.is_finite() || y_new.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                primitive: "dormand_prince".into(),
            });
        }
        let accepted = err <= 1.0;
        trace.steps.push(StepRecord {
            t,
            h,
            error: err,
            accepted,
        });
        let factor = if err == 0.0 {
            5.0
        } else {
            (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
        };
        if accepted {
            t = if last { end } else { t + h };
            y = y_new;
            k1 = k7;
            trace.times.push(t);
            trace.states.push(y[..n].to_vec());
            trace.arc_length.push(y[n]);
            if let Stop::Stationary { threshold, .. } = stop {
                if norm(&k1[..n]) < threshold {
                    trace.stop = StopReason::Stationary;
                    return Ok(trace);
                }
            }
            if last {
                if matches!(stop, Stop::Stationary { .. }) {
                    trace.stop = StopReason::TimeLimit;
                }
                return Ok(trace);
            }
            h *= factor;
        } else {
            h *= factor.min(1.0);
        }
        if h < opts.min_step {
            return Err(Error::Stiffness { t, h });
        }
    }
}

/// Integrates `dx/dt = field(x)` from `x0` over `[0, t_end]`.
pub fn integrate_flow<F: Fn(&[f64]) -> Vec<f64>>(
    field: &F,
    x0: &[f64],
    t_end: f64,
    opts: &FlowOptions,
) -> Result<FlowTrace> {
    if t_end.is_nan() || t_end < 0.0 {
        return Err(Error::Domain {
            value: t_end,
            domain: "[0, inf)",
        });
    }
    run(field, x0, Stop::At(t_end), opts)
}

/// Integrates until `|field(x)| < threshold` or `opts.max_time` is reached.
pub fn integrate_until_stationary<F: Fn(&[f64]) -> Vec<f64>>(
    field: &F,
    x0: &[f64],
    threshold: f64,
    opts: &FlowOptions,
) -> Result<FlowTrace> {
    run(
        field,
        x0,
        Stop::Stationary {
            threshold,
            max_time: opts.max_time,
        },
        opts,
    )
}
