//! Test functions for linear spectral statistics.

use std::fmt;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TestFunction {
    /// `x^power`.
    Monomial { power: u32 },
    /// `Σ_i coefficients[i] x^i`.
    Polynomial { coefficients: Vec<f64> },
    /// `ln(x + offset)`.
    ShiftedLog { offset: f64 },
}

impl TestFunction {
    pub fn monomial(power: u32) -> Self {
        TestFunction::Monomial { power }
    }

    pub fn eval(&self, z: Complex64) -> Complex64 {
        match self {
            TestFunction::Monomial { power } => z.powu(*power),
            TestFunction::Polynomial { coefficients } => coefficients
                .iter()
                .rev()
                .fold(Complex64::new(0.0, 0.0), |acc, c| acc * z + c),
            TestFunction::ShiftedLog { offset } => (z + offset).ln(),
        }
    }

    pub fn eval_real(&self, x: f64) -> Result<f64> {
        match self {
            TestFunction::Monomial { power } => Ok(x.powi(*power as i32)),
            TestFunction::Polynomial { coefficients } => {
                Ok(coefficients.iter().rev().fold(0.0, |acc, c| acc * x + c))
            }
            TestFunction::ShiftedLog { offset } => {
                if x + offset > 0.0 {
                    Ok((x + offset).ln())
                } else {
                    Err(Error::FunctionDomain {
                        function: self.to_string(),
                        x,
                    })
                }
            }
        }
    }

    /// Degree when the function is a polynomial.
    pub fn polynomial_degree(&self) -> Option<usize> {
        match self {
            TestFunction::Monomial { power } => Some(*power as usize),
            TestFunction::Polynomial { coefficients } => {
                Some(coefficients.iter().rposition(|c| *c != 0.0).unwrap_or(0))
            }
            TestFunction::ShiftedLog { .. } => None,
        }
    }

    /// Coefficients in ascending order when the function is a polynomial.
    pub fn coefficients(&self) -> Option<Vec<f64>> {
        match self {
            TestFunction::Monomial { power } => {
                let mut c = vec![0.0; *power as usize + 1];
                c[*power as usize] = 1.0;
                Some(c)
            }
            TestFunction::Polynomial { coefficients } => Some(coefficients.clone()),
            TestFunction::ShiftedLog { .. } => None,
        }
    }

    /// Leftmost real point where the function stops being analytic.
    pub fn singularity(&self) -> Option<f64> {
        match self {
            TestFunction::ShiftedLog { offset } => Some(-offset),
            _ => None,
        }
    }
}

impl fmt::Display for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TestFunction::Monomial { power: 0 } => write!(f, "1"),
            TestFunction::Monomial { power: 1 } => write!(f, "x"),
            TestFunction::Monomial { power } => write!(f, "x^{power}"),
            TestFunction::Polynomial { coefficients } => {
                let terms: Vec<String> = coefficients.iter().map(|c| format!("{c}")).collect();
                write!(f, "poly[{}]", terms.join(";"))
            }
            TestFunction::ShiftedLog { offset } => write!(f, "log(x+{offset})"),
        }
    }
}
