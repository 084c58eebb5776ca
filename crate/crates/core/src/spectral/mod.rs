//! Eigenvalues, spectral functions and matrix-free trace estimation.

pub mod eigen;
pub mod functions;
pub mod lanczos;
pub mod penalty;

pub use eigen::{symmetric_eigen, SymmetricEigen};
pub use functions::{ScalarFn, SpectralFn};
pub use lanczos::{
    hutchinson_trace, lanczos, probe_quadrature, rademacher, tridiagonal_quadrature, DenseOperator,
    FnOperator, LinearOperator, Quadrature, TraceEstimate, Tridiagonal,
};
pub use penalty::{
    eigenvalues_exact, lanczos_rows, penalty_from_eigenvalues, psd_penalty, softmin, Estimator,
    LinearOperatorHandle, Penalty, SpectralPenaltySpec,
};
