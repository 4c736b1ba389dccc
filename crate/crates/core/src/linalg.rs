//! Small dense helpers shared by the kernel and the estimators.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

type C = Complex64;

/// Solves the row system `x (I - m) = rhs` in place for a k x k matrix held
/// row-major in `m`. Returns false when the system is singular.
pub(crate) fn solve_row_identity_minus(
    m: &[C],
    rhs: &[C],
    out: &mut [C],
    scratch: &mut Vec<C>,
) -> bool {
    let k = rhs.len();
    if k == 1 {
        let d = C::new(1.0, 0.0) - m[0];
        if d.norm_sqr() == 0.0 {
            return false;
        }
        out[0] = rhs[0] / d;
        return true;
    }
    // Transpose: (I - m)ᵀ xᵀ = rhsᵀ, stored as an augmented k x (k+1) array.
    scratch.clear();
    scratch.resize(k * (k + 1), C::new(0.0, 0.0));
    let w = k + 1;
    for i in 0..k {
        for j in 0..k {
            let id = if i == j { 1.0 } else { 0.0 };
            scratch[i * w + j] = C::new(id, 0.0) - m[j * k + i];
        }
        scratch[i * w + k] = rhs[i];
    }
    for col in 0..k {
        let pivot = (col..k)
            .max_by(|a, b| {
                scratch[a * w + col]
                    .norm()
                    .total_cmp(&scratch[b * w + col].norm())
            })
            .unwrap();
        if scratch[pivot * w + col].norm() == 0.0 {
            return false;
        }
        if pivot != col {
            for j in 0..w {
                scratch.swap(pivot * w + j, col * w + j);
            }
        }
        let inv = scratch[col * w + col].inv();
        for row in col + 1..k {
            let f = scratch[row * w + col] * inv;
            if f.norm_sqr() != 0.0 {
                for j in col..w {
                    let v = scratch[col * w + j];
                    scratch[row * w + j] -= f * v;
                }
            }
        }
    }
    for row in (0..k).rev() {
        let mut acc = scratch[row * w + k];
        for j in row + 1..k {
            acc -= scratch[row * w + j] * out[j];
        }
        out[row] = acc / scratch[row * w + row];
    }
    true
}

/// Solves `x a = rhs` for a row vector `x`.
pub(crate) fn solve_left(a: &DMatrix<C>, rhs: &[C]) -> Option<Vec<C>> {
    let b = DVector::from_column_slice(rhs);
    let x = a.transpose().lu().solve(&b)?;
    x.iter()
        .all(|v| v.is_finite())
        .then(|| x.iter().copied().collect())
}

/// Inverse square root of a symmetric positive definite matrix, with its
/// condition number.
pub fn sym_inv_sqrt(m: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let eig = SymmetricEigen::new(m.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    let cond = if min > 0.0 { max / min } else { f64::INFINITY };
    let d = eig
        .eigenvalues
        .map(|v| if v > 0.0 { 1.0 / v.sqrt() } else { 0.0 });
    let out = &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose();
    (out, cond)
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}
