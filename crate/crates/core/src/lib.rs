//! Learning tangent frames of sampled manifolds with non-contracting flows.
//!
//! A [`models::FrameModel`] holds vector fields `F`, time functions `T`,
//! conformal factors `sigma`, an interpolant network `s` and a reference point
//! `C`. Training matches the combined field `sum_i T_i F_i` to the velocity of
//! an interpolating path towards `C`, while regularizers keep the flows
//! commuting and non-contracting.

pub mod autodiff;
pub mod baseline;
pub mod cli;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod models;
pub mod seeding;
pub mod spectral;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
