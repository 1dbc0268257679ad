//! Hypergradients of a validation objective with respect to group weights,
//! through the inner `argmin`, via the implicit function theorem.
//!
//! At a stationary point `theta_hat` of a twice-differentiable training
//! objective `h(theta, p)`,
//!
//! ```text
//! d theta_hat / d p = - [d2h/dtheta dtheta]^{-1} [d2h/dtheta dp]
//! ```
//!
//! so the gradient of any validation objective `L(theta_hat(p))` follows by
//! the chain rule. The Hessian is never inverted explicitly; each weight
//! coordinate costs one damped symmetric solve against a shared
//! factorization. Stationarity of the inner solution is verified, not
//! assumed: a gradient norm above ten times the solver tolerance is an
//! error, because the formula above is invalid off-stationarity.
//!
//! Simplex-constrained weights are handled by substituting the last
//! coordinate (`p_G = 1 - sum of the rest`), differentiating the `G - 1`
//! free coordinates, and re-expanding to a zero-sum tangent vector for the
//! multiplicative outer update. Subsample fractions are box-constrained, so
//! their gradient needs no projection; the total subsample size `m` is held
//! fixed during differentiation (it is piecewise constant in `v`).

use crate::data::{GroupedDataset, ParameterVector};
use crate::error::{Error, Result};
use crate::estimators::{
    logistic_gradient, logistic_hessian, subg_relaxed_weights, subsample_counts, PenaltySpec,
};
use crate::linalg::solve_spd_damped;
use crate::scalar::Scalar;
use crate::weights::{
    per_observation_weights_raw, LikelihoodRatios, ShiftSpec, SimplexWeights, SubsampleFractions,
};
use ndarray::{Array1, Array2};

/// Condition-estimate ceiling for the damped Hessian.
const CONDITION_LIMIT: f64 = 1e12;
/// Stationarity slack: the inner gradient may exceed the solver tolerance
/// by at most this factor before the IFT premise is declared violated.
const STALENESS_FACTOR: f64 = 10.0;

/// A hypergradient with its solve diagnostics.
#[derive(Debug, Clone)]
pub struct HypergradReport<T> {
    /// Length-G gradient of the outer objective. For simplex weights this
    /// is the zero-sum tangent expansion of the reduced gradient; for
    /// subsample fractions it is the plain coordinate gradient.
    pub gradient: Array1<T>,
    pub hessian_condition_estimate: T,
    /// Maximum relative residual over the Hessian solves.
    pub solve_residual: T,
    pub damping_used: T,
    /// Norm of the inner training gradient at `theta_hat`.
    pub stationarity_gap: T,
}

/// Per-group sums of per-observation loss gradients
/// `S_g = sum_{i in g} (sigmoid(z_i) - y_i) x_i`, one row per group.
fn per_group_gradient_sums<T: Scalar>(
    theta: &ParameterVector<T>,
    data: &GroupedDataset<T>,
) -> Array2<T> {
    let x = data.features();
    let z = x.dot(theta.coefficients());
    let mut sums = Array2::<T>::zeros((data.num_groups(), x.ncols()));
    for i in 0..data.len() {
        let s = T::one() / (T::one() + (-z[i]).exp());
        let resid = s - data.targets()[i];
        let g = data.groups()[i] - 1;
        let row = x.row(i);
        for j in 0..x.ncols() {
            sums[[g, j]] += resid * row[j];
        }
    }
    sums
}

fn require_all_groups_present<T: Scalar>(data: &GroupedDataset<T>) -> Result<()> {
    for g in 1..=data.num_groups() {
        if data.group_count(g) == 0 {
            return Err(Error::EmptyGroup { group: g });
        }
    }
    Ok(())
}

/// Mixed derivative of the group-weighted training loss with respect to the
/// `G - 1` free simplex coordinates: row `g` is the theta-gradient of
/// `(1/n) [ (1/p_train(g)) sum_{i in g} l_i - (1/p_train(G)) sum_{i in G} l_i ]`
/// evaluated at `theta_hat`. Penalties do not depend on the group weights
/// and therefore contribute nothing.
pub fn cross_derivative_group_weights<T: Scalar>(
    theta_hat: &ParameterVector<T>,
    train: &GroupedDataset<T>,
    train_marginals: &[T],
) -> Result<Array2<T>> {
    require_all_groups_present(train)?;
    let num_groups = train.num_groups();
    if train_marginals.len() != num_groups {
        return Err(Error::Size("marginals do not match group count".into()));
    }
    if train_marginals.iter().any(|&m| m <= T::zero()) {
        return Err(Error::Domain("training marginals must be positive".into()));
    }
    let sums = per_group_gradient_sums(theta_hat, train);
    let dim = train.dim();
    let n = T::from_count(train.len());
    let pivot = num_groups - 1; // 0-based row of group G
    let mut cross = Array2::<T>::zeros((num_groups.saturating_sub(1), dim));
    for g in 0..num_groups.saturating_sub(1) {
        for j in 0..dim {
            cross[[g, j]] = (sums[[g, j]] / train_marginals[g]
                - sums[[pivot, j]] / train_marginals[pivot])
                / n;
        }
    }
    Ok(cross)
}

/// Mixed derivative of the relaxed subsampling loss with respect to the
/// fractions: row `g` is the theta-gradient of `(1/m) sum_{i in g} l_i`,
/// with the subsample size `m` held fixed.
pub fn cross_derivative_fractions<T: Scalar>(
    theta_hat: &ParameterVector<T>,
    train: &GroupedDataset<T>,
    v: &SubsampleFractions<T>,
) -> Result<Array2<T>> {
    require_all_groups_present(train)?;
    if v.num_groups() != train.num_groups() {
        return Err(Error::Size("fraction vector does not match group count".into()));
    }
    let (_, m) = subsample_counts(v, train.group_counts());
    if m == 0 {
        return Err(Error::Size("subsample is empty".into()));
    }
    let mut cross = per_group_gradient_sums(theta_hat, train);
    let mf = T::from_count(m);
    cross.mapv_inplace(|c| c / mf);
    Ok(cross)
}

/// Jacobian of the inner solution with respect to `K` weight coordinates:
/// `-cross * (hessian + damping I)^{-1}`, computed by `K` symmetric solves
/// against one factorization (never an explicit inverse). Row `k` is
/// `d theta_hat / d weight_k` transposed.
pub fn ift_parameter_jacobian<T: Scalar>(
    hessian: &Array2<T>,
    cross: &Array2<T>,
    damping: T,
) -> Result<(Array2<T>, T, T)> {
    if damping < T::zero() {
        return Err(Error::Domain("damping must be non-negative".into()));
    }
    let rhs: Vec<Array1<T>> = (0..cross.nrows()).map(|k| cross.row(k).to_owned()).collect();
    let solve = solve_spd_damped(hessian, &rhs, damping, T::of(CONDITION_LIMIT))?;
    let mut jac = Array2::<T>::zeros((cross.nrows(), cross.ncols()));
    for (k, sol) in solve.solutions.iter().enumerate() {
        for j in 0..cross.ncols() {
            jac[[k, j]] = -sol[j];
        }
    }
    Ok((jac, solve.condition, solve.max_relative_residual))
}

fn stationarity_check<T: Scalar>(grad: &Array1<T>, tolerance: T) -> Result<T> {
    let norm = grad.iter().map(|g| *g * *g).sum::<T>().sqrt();
    if norm > T::of(STALENESS_FACTOR) * tolerance {
        return Err(Error::Staleness {
            grad_norm: norm.to_f64_lossy(),
            tolerance: tolerance.to_f64_lossy(),
        });
    }
    Ok(norm)
}

/// Project `(reduced_1 .. reduced_{G-1}, 0)` onto the zero-sum tangent
/// space of the simplex; pairwise differences (and hence all directional
/// derivatives along simplex directions) are preserved.
fn expand_to_tangent<T: Scalar>(reduced: &[T]) -> Array1<T> {
    let g = reduced.len() + 1;
    let mut full = Array1::<T>::zeros(g);
    let mut sum = T::zero();
    for (k, &r) in reduced.iter().enumerate() {
        full[k] = r;
        sum += r;
    }
    let mean = sum / T::from_count(g);
    full.mapv_inplace(|v| v - mean);
    full
}

/// Hypergradient of a per-group-weighted validation loss with respect to
/// simplex group weights, in expanded zero-sum tangent form.
///
/// The inner objective is the group-weighted penalized logistic loss with
/// per-observation weights `p(g)/train_marginals(g)`; the outer objective
/// is the validation loss with per-observation weights
/// `val_group_weights(g)`. `theta_hat` must be stationary for the inner
/// objective within ten times `stationarity_tolerance`.
#[allow(clippy::too_many_arguments)]
pub fn hypergradient_group_weights_with<T: Scalar>(
    theta_hat: &ParameterVector<T>,
    train: &GroupedDataset<T>,
    val: &GroupedDataset<T>,
    p: &SimplexWeights<T>,
    train_marginals: &[T],
    val_group_weights: &[T],
    penalty: &PenaltySpec<T>,
    damping: T,
    stationarity_tolerance: T,
) -> Result<HypergradReport<T>> {
    let w_train = per_observation_weights_raw(p.values(), train_marginals, train.groups())?;
    let inner_grad = logistic_gradient(theta_hat, train, &w_train, penalty)?;
    let gap = stationarity_check(&inner_grad, stationarity_tolerance)?;

    let hessian = logistic_hessian(theta_hat, train, &w_train, penalty)?;
    let cross = cross_derivative_group_weights(theta_hat, train, train_marginals)?;
    let (jac, condition, residual) = ift_parameter_jacobian(&hessian, &cross, damping)?;

    let w_val: Vec<T> = val
        .groups()
        .iter()
        .map(|&g| val_group_weights[g - 1])
        .collect();
    let val_grad = logistic_gradient(theta_hat, val, &w_val, &PenaltySpec::None)?;

    let reduced: Vec<T> = (0..jac.nrows())
        .map(|k| jac.row(k).dot(&val_grad))
        .collect();
    Ok(HypergradReport {
        gradient: expand_to_tangent(&reduced),
        hessian_condition_estimate: condition,
        solve_residual: residual,
        damping_used: damping,
        stationarity_gap: gap,
    })
}

/// [`hypergradient_group_weights_with`] for the standard estimation loop:
/// training marginals and the ratio-weighted validation loss both come from
/// the shift specification.
#[allow(clippy::too_many_arguments)]
pub fn hypergradient_group_weights<T: Scalar>(
    theta_hat: &ParameterVector<T>,
    train: &GroupedDataset<T>,
    val: &GroupedDataset<T>,
    p: &SimplexWeights<T>,
    shift: &ShiftSpec<T>,
    ratios: &LikelihoodRatios<T>,
    penalty: &PenaltySpec<T>,
    damping: T,
    stationarity_tolerance: T,
) -> Result<HypergradReport<T>> {
    hypergradient_group_weights_with(
        theta_hat,
        train,
        val,
        p,
        shift.p_train(),
        ratios.values(),
        penalty,
        damping,
        stationarity_tolerance,
    )
}

/// Hypergradient of a per-group-weighted validation loss with respect to
/// subsample fractions (no simplex projection; fractions are unnormalized).
/// Any pinned coordinate is reported like the rest and masked by the outer
/// update, not here.
#[allow(clippy::too_many_arguments)]
pub fn hypergradient_fractions<T: Scalar>(
    theta_hat: &ParameterVector<T>,
    train: &GroupedDataset<T>,
    val: &GroupedDataset<T>,
    v: &SubsampleFractions<T>,
    val_group_weights: &[T],
    penalty: &PenaltySpec<T>,
    damping: T,
    stationarity_tolerance: T,
) -> Result<HypergradReport<T>> {
    let w_train = subg_relaxed_weights(v, train)?;
    let inner_grad = logistic_gradient(theta_hat, train, &w_train, penalty)?;
    stationarity_check(&inner_grad, stationarity_tolerance)?;
    hypergradient_fractions_unverified(
        theta_hat,
        train,
        val,
        v,
        val_group_weights,
        penalty,
        damping,
    )
}

/// [`hypergradient_fractions`] without the stationarity check. Intended
/// for ensemble members, whose parameters are stationary for their own
/// subsample loss rather than for the relaxed objective whose curvature
/// drives the implicit solve; everywhere else prefer the checked entry
/// point.
#[allow(clippy::too_many_arguments)]
pub fn hypergradient_fractions_unverified<T: Scalar>(
    theta_hat: &ParameterVector<T>,
    train: &GroupedDataset<T>,
    val: &GroupedDataset<T>,
    v: &SubsampleFractions<T>,
    val_group_weights: &[T],
    penalty: &PenaltySpec<T>,
    damping: T,
) -> Result<HypergradReport<T>> {
    let w_train = subg_relaxed_weights(v, train)?;
    let inner_grad = logistic_gradient(theta_hat, train, &w_train, penalty)?;
    let gap = inner_grad.iter().map(|g| *g * *g).sum::<T>().sqrt();

    let hessian = logistic_hessian(theta_hat, train, &w_train, penalty)?;
    let cross = cross_derivative_fractions(theta_hat, train, v)?;
    let (jac, condition, residual) = ift_parameter_jacobian(&hessian, &cross, damping)?;

    let w_val: Vec<T> = val
        .groups()
        .iter()
        .map(|&g| val_group_weights[g - 1])
        .collect();
    let val_grad = logistic_gradient(theta_hat, val, &w_val, &PenaltySpec::None)?;

    let gradient = Array1::from_iter((0..jac.nrows()).map(|k| jac.row(k).dot(&val_grad)));
    Ok(HypergradReport {
        gradient,
        hessian_condition_estimate: condition,
        solve_residual: residual,
        damping_used: damping,
        stationarity_gap: gap,
    })
}

/// Central finite differences of `objective` along each given direction:
/// `(f(w + step d) - f(w - step d)) / (2 step)`. The objective closure is
/// expected to refit the inner problem from scratch, making this an
/// implementation-independent oracle for the IFT path (second-order
/// accurate in `step`).
pub fn finite_difference_gradient<T, F>(
    objective: F,
    weights: &[T],
    directions: &[Vec<T>],
    step: T,
) -> Result<Vec<T>>
where
    T: Scalar,
    F: Fn(&[T]) -> Result<T>,
{
    if !(step > T::zero()) {
        return Err(Error::Domain("step must be positive".into()));
    }
    let mut out = Vec::with_capacity(directions.len());
    for dir in directions {
        if dir.len() != weights.len() {
            return Err(Error::Size("direction length mismatch".into()));
        }
        let up: Vec<T> = weights.iter().zip(dir).map(|(&w, &d)| w + step * d).collect();
        let dn: Vec<T> = weights.iter().zip(dir).map(|(&w, &d)| w - step * d).collect();
        out.push((objective(&up)? - objective(&dn)?) / (T::of(2.0) * step));
    }
    Ok(out)
}

/// The `G - 1` simplex-preserving directions `e_g - e_G` used to
/// finite-difference a simplex-constrained objective.
pub fn simplex_directions<T: Scalar>(num_groups: usize) -> Vec<Vec<T>> {
    (0..num_groups.saturating_sub(1))
        .map(|g| {
            let mut d = vec![T::zero(); num_groups];
            d[g] = T::one();
            d[num_groups - 1] = -T::one();
            d
        })
        .collect()
}

/// Axis-aligned directions for box-constrained coordinates.
pub fn axis_directions<T: Scalar>(num_groups: usize) -> Vec<Vec<T>> {
    (0..num_groups)
        .map(|g| {
            let mut d = vec![T::zero(); num_groups];
            d[g] = T::one();
            d
        })
        .collect()
}

/// Reduced (pivot) coordinates `zeta_g - zeta_G` of an expanded tangent
/// vector, the form directly comparable with simplex finite differences.
pub fn tangent_to_reduced<T: Scalar>(tangent: &Array1<T>) -> Vec<T> {
    let g = tangent.len();
    (0..g - 1).map(|k| tangent[k] - tangent[g - 1]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn jacobian_with_identity_hessian_is_minus_cross() {
        let h: Array2<f64> = Array2::eye(3);
        let c = array![[1.0, 2.0, 3.0], [0.5, -0.5, 0.0]];
        let (jac, cond, resid) = ift_parameter_jacobian(&h, &c, 0.0).unwrap();
        for k in 0..2 {
            for j in 0..3 {
                assert!((jac[[k, j]] + c[[k, j]]).abs() < 1e-14);
            }
        }
        assert!((cond - 1.0).abs() < 1e-12);
        assert!(resid < 1e-14);
    }

    #[test]
    fn jacobian_matches_the_scalar_quadratic() {
        // h = a/2 theta^2 + b p theta: dtheta*/dp = -b/a
        let a = 2.5f64;
        let b = 0.7;
        let h = array![[a]];
        let c = array![[b]];
        let (jac, _, _) = ift_parameter_jacobian(&h, &c, 0.0).unwrap();
        assert!((jac[[0, 0]] - (-b / a)).abs() < 1e-14);
    }

    #[test]
    fn huge_damping_suppresses_the_jacobian() {
        let h: Array2<f64> = Array2::eye(2) * 3.0;
        let c = array![[1.0, -2.0]];
        let (jac, _, _) = ift_parameter_jacobian(&h, &c, 1e10).unwrap();
        assert!(jac[[0, 0]].abs() < 1e-9 && jac[[0, 1]].abs() < 1e-9);
    }

    #[test]
    fn ill_conditioned_hessian_is_rejected() {
        let mut h: Array2<f64> = Array2::eye(2);
        h[[1, 1]] = 1e-14;
        let c = array![[1.0, 1.0]];
        assert!(matches!(
            ift_parameter_jacobian(&h, &c, 0.0).unwrap_err(),
            Error::IllConditioned { .. }
        ));
    }

    #[test]
    fn tangent_expansion_is_zero_sum_and_difference_preserving() {
        let reduced = [0.4f64, -1.2, 0.8];
        let t = expand_to_tangent(&reduced);
        assert_eq!(t.len(), 4);
        assert!(t.sum().abs() < 1e-12);
        let back = tangent_to_reduced(&t);
        for (a, b) in back.iter().zip(&reduced) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fd_oracle_matches_a_closed_form_quadratic() {
        // f(w) = w' A w / 2 with known gradient A w
        let a = array![[2.0, 0.3], [0.3, 1.0]];
        let f = |w: &[f64]| {
            let wv = array![w[0], w[1]];
            Ok(wv.dot(&a.dot(&wv)) / 2.0)
        };
        let w = [0.7, -0.4];
        let grad = finite_difference_gradient(f, &w, &axis_directions(2), 1e-5).unwrap();
        let exact = a.dot(&array![0.7, -0.4]);
        for j in 0..2 {
            assert!((grad[j] - exact[j]).abs() < 1e-8);
        }
    }

    #[test]
    fn fd_error_shrinks_quadratically_in_the_step() {
        // f(w) = w^4 has third derivative, so central differences carry an
        // O(step^2) error; halving the step should shrink it ~4x.
        let f = |w: &[f64]| Ok(w[0].powi(4));
        let exact = 4.0 * 0.9f64.powi(3);
        let e1 = (finite_difference_gradient(f, &[0.9], &axis_directions(1), 1e-2).unwrap()[0]
            - exact)
            .abs();
        let e2 = (finite_difference_gradient(f, &[0.9], &axis_directions(1), 5e-3).unwrap()[0]
            - exact)
            .abs();
        let ratio = e1 / e2;
        assert!((3.0..5.0).contains(&ratio), "ratio {ratio}");
    }
}
