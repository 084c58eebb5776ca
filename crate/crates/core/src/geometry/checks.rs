//! Numerical checks of flow commutation and non-contraction.

use super::ode::{integrate_flow, integrate_until_stationary, FlowOptions, StopReason};
use crate::error::Result;

/// Velocity below which the combined flow counts as stationary.
pub const STATIONARY_SPEED: f64 = 1e-6;

/// Relative slack allowed by [`equal_time_noncontraction_check`].
pub const NONCONTRACTION_TOL: f64 = 1e-6;

pub type Field<'a> = &'a dyn Fn(&[f64]) -> Vec<f64>;

#[derive(Clone, Debug)]
pub struct FlowComparison {
    pub composed: Vec<f64>,
    pub combined: Vec<f64>,
    /// Euclidean distance between the two endpoints.
    pub residual: f64,
    pub combined_stop: StopReason,
}

fn flow_signed(field: Field, x: &[f64], tau: f64, opts: &FlowOptions) -> Result<Vec<f64>> {
    if tau >= 0.0 {
        Ok(integrate_flow(&field, x, tau, opts)?.final_state().to_vec())
    } else {
        let back = |z: &[f64]| field(z).into_iter().map(|v| -v).collect::<Vec<_>>();
        Ok(integrate_flow(&back, x, -tau, opts)?.final_state().to_vec())
    }
}

/// Compares the sequential flows `phi_m o ... o phi_1` with the flow of the
/// combined field `sum_i T_i F_i`.
///
/// Stage `i` flows along `F_i` for `horizon * T_i(z)` with `z` the stage's
/// starting point. The combined field runs for `horizon`; an infinite horizon
/// runs it until its speed drops below [`STATIONARY_SPEED`] (the sequential
/// stages then use the unscaled times).
pub fn composed_vs_combined_flow_check(
    fields: &[Field],
    times: Field,
    x: &[f64],
    horizon: f64,
    opts: &FlowOptions,
) -> Result<FlowComparison> {
    let scale = if horizon.is_finite() { horizon } else { 1.0 };
    let mut z = x.to_vec();
    for (i, f) in fields.iter().enumerate() {
        let tau = scale * times(&z)[i];
        z = flow_signed(*f, &z, tau, opts)?;
    }
    let combined_field = |p: &[f64]| {
        let t = times(p);
        let mut v = vec![0.0; p.len()];
        for (f, ti) in fields.iter().zip(&t) {
            v.iter_mut().zip(f(p)).for_each(|(a, b)| *a += ti * b);
        }
        v
    };
    let trace = if horizon.is_finite() {
        integrate_flow(&combined_field, x, horizon, opts)?
    } else {
        integrate_until_stationary(&combined_field, x, STATIONARY_SPEED, opts)?
    };
    let combined = trace.final_state().to_vec();
    let residual = z
        .iter()
        .zip(&combined)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(FlowComparison {
        composed: z,
        combined,
        residual,
        combined_stop: trace.stop,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct NonContraction {
    /// `|phi_t(x) - phi_t(y)| / |x - y|`
    pub ratio: f64,
    pub holds: bool,
}

/// Whether flowing two points for the same time does not bring them closer.
pub fn equal_time_noncontraction_check(
    field: Field,
    x: &[f64],
    y: &[f64],
    t: f64,
    opts: &FlowOptions,
) -> Result<NonContraction> {
    let dist = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(p, q)| (p - q).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let fx = integrate_flow(&field, x, t, opts)?;
    let fy = integrate_flow(&field, y, t, opts)?;
    let ratio = dist(fx.final_state(), fy.final_state()) / dist(x, y);
    Ok(NonContraction {
        ratio,
        holds: ratio >= 1.0 - NONCONTRACTION_TOL,
    })
}
