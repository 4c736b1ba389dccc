//! Deterministic equivalents, CLT bias and covariance for linear spectral
//! statistics of multi-level variance-component sample covariance matrices.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod clt;
pub mod contour;
pub mod error;
pub mod fixed_point;
pub mod functions;
pub mod linalg;
pub mod model;
pub mod mom;
pub mod provenance;
pub mod rng;
pub mod simulate;

pub use clt::{build_kernel, cov_point, sigma2, sigma2_cauchy, CltKernel, CovKernelPoint, CovMode};
pub use contour::{
    clt_summary, gamma_vector, lambda_matrix, trapezoid, CltSummary, Contour, ContourOptions,
};
pub use error::{Error, Result};
pub use fixed_point::{
    deterministic_equivalent, esd_density, lss_centering, solve_along_contour, solve_system,
    DeterministicEquivalent, FixedPointSolution, SolverOptions,
};
pub use functions::TestFunction;
pub use model::{
    build_model, build_model_with, scalings_from_design, support_bound, t_matrix, BuiltModel,
    Covariance, ModelConfig, ModelOptions, NestedDesign, SpectrumSpec, VarianceModel,
};
pub use num_complex::Complex64;
