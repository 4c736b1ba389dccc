use num_complex::Complex64;
use thiserror::Error;

/// Errors raised anywhere in the numerical pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix {index} is not symmetric (max relative asymmetry {asymmetry:.3e})")]
    Asymmetric { index: usize, asymmetry: f64 },

    #[error("matrix {index} is indefinite (smallest eigenvalue {min_eigenvalue:.3e})")]
    Indefinite { index: usize, min_eigenvalue: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("design is not nested: {0}")]
    NonNested(String),

    #[error("point {z} is not in the upper half plane")]
    NotUpperHalfPlane { z: Complex64 },

    #[error("fixed-point solver did not converge at z = {z} after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence {
        z: Complex64,
        iterations: usize,
        residual: f64,
        trajectory: Vec<f64>,
    },

    #[error("solution at z = {0} has not converged")]
    NotConverged(Complex64),

    #[error("singular {what} system at z = {z}")]
    Singular { what: &'static str, z: Complex64 },

    #[error("imaginary residue {imag:.3e} exceeds tolerance for {what} (real part {real:.6e})")]
    ImaginaryResidue { what: String, real: f64, imag: f64 },

    #[error(
        "covariance matrix is not positive semidefinite (smallest eigenvalue {min_eigenvalue:.3e})"
    )]
    NotPsd { min_eigenvalue: f64 },

    #[error("quadrature under-resolved: {0}")]
    Quadrature(String),

    #[error("finite-difference and Cauchy derivatives disagree (relative {relative:.3e})")]
    DerivativeMismatch { relative: f64 },

    #[error("deterministic-equivalent identities disagree by {0:.3e}")]
    Inconsistent(f64),

    #[error("function {function} is undefined at {x}")]
    FunctionDomain { function: String, x: f64 },

    #[error("covariance is ill-conditioned (condition number {0:.3e})")]
    IllConditioned(f64),

    #[error("Newton iteration for the moment map did not converge (relative residual {0:.3e})")]
    MomentInversion(f64),

    #[error("at node {index}: {source}")]
    AtNode {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("model spec: {0}")]
    Spec(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn at_node(index: usize, source: Error) -> Self {
        Error::AtNode {
            index,
            source: Box::new(source),
        }
    }

    /// Strips any node-index wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtNode { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
