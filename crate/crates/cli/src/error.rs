use thiserror::Error;
use vcclt::Error as CoreError;

/// Failures sorted by the exit status they produce.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
    #[error("solver: {0}")]
    NonConvergence(String),
    #[error("numerical quality: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 1,
            CliError::NonConvergence(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(err: CoreError) -> Self {
        let msg = err.to_string();
        match err.root() {
            CoreError::Io(_) => CliError::Io(msg),
            CoreError::Json(_) | CoreError::Csv(_) => CliError::Io(msg),
            CoreError::NonConvergence { .. }
            | CoreError::NotConverged(_)
            | CoreError::NotUpperHalfPlane { .. }
            | CoreError::MomentInversion(_) => CliError::NonConvergence(msg),
            CoreError::Singular { .. }
            | CoreError::ImaginaryResidue { .. }
            | CoreError::NotPsd { .. }
            | CoreError::Quadrature(_)
            | CoreError::DerivativeMismatch { .. }
            | CoreError::Inconsistent(_)
            | CoreError::IllConditioned(_) => CliError::Numerical(msg),
            _ => CliError::Config(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> Self {
        CliError::Io(err.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(err: serde_json::Error) -> Self {
        CliError::Io(err.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(err: csv::Error) -> Self {
        CliError::Io(err.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn node_wrappers_do_not_hide_the_category() {
        let inner = CoreError::NotPsd {
            min_eigenvalue: -1.0,
        };
        let wrapped = CoreError::AtNode {
            index: 3,
            source: Box::new(inner),
        };
        assert_eq!(CliError::from(wrapped).exit_code(), 3);
        assert_eq!(CliError::from(CoreError::Spec("x".into())).exit_code(), 1);
        assert_eq!(
            CliError::from(CoreError::MomentInversion(1.0)).exit_code(),
            2
        );
    }
}
