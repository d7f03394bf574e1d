//! Isospectral bracket flows `H' = [H, G(H)]` on dense real matrices.
//!
//! The crate integrates the Brockett, Toda and Wegner flows, co-evolves the
//! orthogonal/triangular factors `g1, g2` with `e^{tH0} = g1 g2`, and measures
//! how fast each run approaches its diagonal limit against the rate the
//! generator's coefficient table predicts.
//!
//! ```
//! use bracketflow::{integrate, paper_standard_h0, GeneratorSpec, IntegratorConfig};
//!
//! let h0 = paper_standard_h0(5).unwrap();
//! let traj = integrate(&GeneratorSpec::Toda, &h0, &IntegratorConfig::default(), false).unwrap();
//! let diag = traj.last().h.diagonal();
//! assert!((diag[0] - 25.0).abs() < 1e-4);
//! ```
//!
//! A longer guide lives in `book/`; its code listings are compiled and run as
//! doctests of this crate.

pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod generator;
pub mod integrator;
pub mod matrix;
pub mod spectral;

pub use diagnostics::{
    auto_window, column_residual_rate, column_residual_series, compare_spectrum, fit_rate,
    fit_rate_auto, qr_compare, QrCompareReport, RateFit, RateReport,
};
pub use error::{DriftMonitor, FlowError, Result};
pub use experiment::{
    hs_truncation_study, paper_block_h0, paper_standard_h0, reproduce, run, ExperimentConfig,
    ExperimentError, FigureId, RunManifest,
};
pub use generator::{
    apply_generator, apply_generator_with, check_assumptions, matrix_eigenvalue, predicted_rate,
    rate_table, vector_field, vector_field_with, wegner_predicted_rate, wegner_rate_table,
    AssumptionCheck, GeneratorKind, GeneratorSpec, MatrixEigenvalue, PredictedRate, Symmetry,
};
pub use integrator::{
    conjugation_residual, factor_residuals, integrate, step, FlowState, IntegratorConfig,
    Trajectory, TrajectorySeries,
};
pub use matrix::{
    basis_skew, basis_sym, commutator, expm, frobenius_norm, householder_qr, skew_lower_ones,
    Matrix, QrFactors,
};
pub use spectral::{
    compare_spectra, inverse, jacobi_eigenvalues, leading_minor_invertible, qr_iteration, solve,
    Spectrum, SpectrumComparison,
};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/matrices.md")]
    mod matrices {}
    #[doc = include_str!("../../../book/src/generators.md")]
    mod generators {}
    #[doc = include_str!("../../../book/src/rates.md")]
    mod rates {}
    #[doc = include_str!("../../../book/src/integration.md")]
    mod integration {}
    #[doc = include_str!("../../../book/src/factorization.md")]
    mod factorization {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
    #[doc = include_str!("../../../book/src/truncation.md")]
    mod truncation {}
}
