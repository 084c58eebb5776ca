//! Lie brackets, Lie derivatives, flow integration and flow checks.

pub mod checks;
pub mod lie;
pub mod ode;

pub use checks::{
    composed_vs_combined_flow_check, equal_time_noncontraction_check, FlowComparison,
    NonContraction,
};
pub use lie::{lie_bracket, lie_derivative_matrix};
pub use ode::{
    integrate_flow, integrate_until_stationary, FlowOptions, FlowTrace, StepRecord, StopReason,
};
