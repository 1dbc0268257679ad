//! Dense symmetric linear algebra for small systems.
//!
//! The normal-equation and Hessian systems in this crate have at most a few
//! hundred unknowns, so a plain Cholesky factorization with an exact 1-norm
//! condition estimate is sufficient and keeps the crate scalar-generic.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{Array1, Array2};

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
pub struct CholeskyFactor<T> {
    l: Array2<T>,
}

/// Factor a symmetric positive-definite matrix. Returns `None` when a pivot
/// is not strictly positive (the matrix is singular or indefinite).
pub fn cholesky<T: Scalar>(a: &Array2<T>) -> Option<CholeskyFactor<T>> {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    let mut l = Array2::<T>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d = d - l[[j, k]] * l[[j, k]];
        }
        if !(d > T::zero()) || !d.is_finite() {
            return None;
        }
        let dj = d.sqrt();
        l[[j, j]] = dj;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s = s - l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / dj;
        }
    }
    Some(CholeskyFactor { l })
}

impl<T: Scalar> CholeskyFactor<T> {
    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// Solve `A x = b` given the factorization `A = L L'`.
    pub fn solve(&self, b: &Array1<T>) -> Array1<T> {
        let n = self.dim();
        let mut x = b.clone();
        // forward substitution L y = b
        for i in 0..n {
            let mut s = x[i];
            for k in 0..i {
                s = s - self.l[[i, k]] * x[k];
            }
            x[i] = s / self.l[[i, i]];
        }
        // back substitution L' x = y
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in (i + 1)..n {
                s = s - self.l[[k, i]] * x[k];
            }
            x[i] = s / self.l[[i, i]];
        }
        x
    }

    /// Solve with one step of iterative refinement against the original
    /// matrix, which keeps the relative residual near machine precision even
    /// when the system is poorly conditioned.
    pub fn solve_refined(&self, a: &Array2<T>, b: &Array1<T>) -> Array1<T> {
        let mut x = self.solve(b);
        let r = b - &a.dot(&x);
        let dx = self.solve(&r);
        x += &dx;
        x
    }
}

/// Exact 1-norm of a matrix (maximum absolute column sum).
pub fn norm1<T: Scalar>(a: &Array2<T>) -> T {
    let mut best = T::zero();
    for j in 0..a.ncols() {
        let s: T = (0..a.nrows()).map(|i| a[[i, j]].abs()).sum();
        if s > best {
            best = s;
        }
    }
    best
}

/// Exact 1-norm condition estimate of a factored symmetric matrix,
/// computed from `||A||_1 * max_j ||A^{-1} e_j||_1`. The systems in this
/// crate are small enough that the column-by-column inverse norm is cheap.
pub fn condition_1norm<T: Scalar>(a: &Array2<T>, factor: &CholeskyFactor<T>) -> T {
    let n = a.nrows();
    let mut inv_norm = T::zero();
    let mut e = Array1::<T>::zeros(n);
    for j in 0..n {
        e[j] = T::one();
        let col = factor.solve(&e);
        e[j] = T::zero();
        let s: T = col.iter().map(|v| v.abs()).sum();
        if s > inv_norm {
            inv_norm = s;
        }
    }
    norm1(a) * inv_norm
}

/// Result of a damped symmetric solve with diagnostics.
#[derive(Debug)]
pub struct SpdSolve<T> {
    pub solutions: Vec<Array1<T>>,
    /// Maximum relative residual over the right-hand sides.
    pub max_relative_residual: T,
    /// 1-norm condition estimate of the damped matrix.
    pub condition: T,
}

/// Solve `(A + damping I) x = b` for each right-hand side of a symmetric
/// positive semi-definite `A`. Errors with `IllConditioned` when the damped
/// matrix has a 1-norm condition estimate above `1e12`, and with
/// `SingularDesign` when the factorization fails outright.
pub fn solve_spd_damped<T: Scalar>(
    a: &Array2<T>,
    rhs: &[Array1<T>],
    damping: T,
    condition_limit: T,
) -> Result<SpdSolve<T>> {
    let n = a.nrows();
    let mut damped = a.clone();
    for i in 0..n {
        damped[[i, i]] += damping;
    }
    let factor = cholesky(&damped).ok_or(Error::SingularDesign {
        condition: f64::INFINITY,
    })?;
    let condition = condition_1norm(&damped, &factor);
    if condition > condition_limit {
        return Err(Error::IllConditioned {
            condition: condition.to_f64_lossy(),
        });
    }
    let mut solutions = Vec::with_capacity(rhs.len());
    let mut max_rel = T::zero();
    for b in rhs {
        let x = factor.solve_refined(&damped, b);
        let resid = b - &damped.dot(&x);
        let bnorm = b.iter().map(|v| *v * *v).sum::<T>().sqrt();
        let rnorm = resid.iter().map(|v| *v * *v).sum::<T>().sqrt();
        let rel = if bnorm > T::zero() { rnorm / bnorm } else { T::zero() };
        if rel > max_rel {
            max_rel = rel;
        }
        solutions.push(x);
    }
    Ok(SpdSolve {
        solutions,
        max_relative_residual: max_rel,
        condition,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn solves_a_known_spd_system() {
        let a: Array2<f64> = array![[4.0, 1.0], [1.0, 3.0]];
        let b = array![1.0, 2.0];
        let f = cholesky(&a).unwrap();
        let x = f.solve(&b);
        // solved by hand: x = (1/11, 7/11)
        assert!((x[0] - 1.0 / 11.0).abs() < 1e-14);
        assert!((x[1] - 7.0 / 11.0).abs() < 1e-14);
    }

    #[test]
    fn rejects_indefinite_matrix() {
        let a = array![[1.0, 2.0], [2.0, 1.0]];
        assert!(cholesky(&a).is_none());
    }

    #[test]
    fn condition_of_identity_is_one() {
        let a = Array2::<f64>::eye(5);
        let f = cholesky(&a).unwrap();
        let c = condition_1norm(&a, &f);
        assert!((c - 1.0).abs() < 1e-14);
    }

    #[test]
    fn damped_solve_reports_small_residual() {
        let a: Array2<f64> = array![[2.0, 0.5, 0.1], [0.5, 1.5, 0.2], [0.1, 0.2, 1.0]];
        let rhs = vec![array![1.0, 0.0, -1.0], array![0.3, 0.7, 0.1]];
        let out = solve_spd_damped(&a, &rhs, 1e-9, 1e12).unwrap();
        assert!(out.max_relative_residual < 1e-12);
        assert!(out.condition > 1.0);
    }

    #[test]
    fn ill_conditioned_is_reported() {
        let mut a = Array2::<f64>::eye(3);
        a[[2, 2]] = 1e-14;
        let err = solve_spd_damped(&a, &[array![1.0, 1.0, 1.0]], 0.0, 1e12).unwrap_err();
        assert!(matches!(err, Error::IllConditioned { .. }));
    }
}
