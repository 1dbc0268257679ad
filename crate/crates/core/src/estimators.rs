//! Weighted parameter estimation: weighted least squares, penalized
//! weighted logistic regression, the relaxed subsampling objective, and the
//! subsampled ensemble estimator.
//!
//! The logistic objective is `(1/n) sum_i w_i l(y_i, sigmoid(x_i' theta)) +
//! penalty(theta)`, with the log loss in numerically stable form and the
//! intercept (column 0) excluded from penalties. Keeping the `1/n`
//! prefactor outside the weights gives the penalty strength a
//! dataset-size-independent meaning.

use crate::data::{GroupedDataset, ParameterVector};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, condition_1norm};
use crate::scalar::Scalar;
use crate::seed::rng_from_seed;
use crate::weights::SubsampleFractions;
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

/// Coefficient penalty. The smoothed-l1 kind replaces `|x|` by
/// `sqrt(x^2 + epsilon^2)` so the objective stays twice differentiable,
/// which the implicit-function-theorem hypergradient requires. The exact
/// lasso penalty is available for baseline-only fits via subgradient-free
/// routes and is deliberately not offered here.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PenaltySpec<T> {
    None,
    Ridge { lambda: T },
    SmoothedL1 { lambda: T, epsilon: T },
}

impl<T: Scalar> PenaltySpec<T> {
    pub fn ridge(lambda: T) -> Self {
        PenaltySpec::Ridge { lambda }
    }

    /// Smoothed-l1 with the default smoothing scale 1e-4.
    pub fn smoothed_l1(lambda: T) -> Self {
        PenaltySpec::SmoothedL1 { lambda, epsilon: T::of(1e-4) }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            PenaltySpec::None => Ok(()),
            PenaltySpec::Ridge { lambda } => {
                if lambda < T::zero() || !lambda.is_finite() {
                    return Err(Error::Domain("ridge lambda must be non-negative".into()));
                }
                Ok(())
            }
            PenaltySpec::SmoothedL1 { lambda, epsilon } => {
                if lambda < T::zero() || !lambda.is_finite() {
                    return Err(Error::Domain("l1 lambda must be non-negative".into()));
                }
                if !(epsilon > T::zero()) {
                    return Err(Error::Domain("smoothing epsilon must be positive".into()));
                }
                Ok(())
            }
        }
    }

    /// Penalty value; the intercept (index 0) is excluded.
    pub fn value(&self, theta: &Array1<T>) -> T {
        match *self {
            PenaltySpec::None => T::zero(),
            PenaltySpec::Ridge { lambda } => {
                let s: T = theta.iter().skip(1).map(|&t| t * t).sum();
                lambda * s / T::of(2.0)
            }
            PenaltySpec::SmoothedL1 { lambda, epsilon } => {
                let s: T = theta
                    .iter()
                    .skip(1)
                    .map(|&t| (t * t + epsilon * epsilon).sqrt())
                    .sum();
                lambda * s
            }
        }
    }

    /// Gradient contribution, zero on the intercept.
    pub fn add_gradient(&self, theta: &Array1<T>, grad: &mut Array1<T>) {
        match *self {
            PenaltySpec::None => {}
            PenaltySpec::Ridge { lambda } => {
                for j in 1..theta.len() {
                    grad[j] += lambda * theta[j];
                }
            }
            PenaltySpec::SmoothedL1 { lambda, epsilon } => {
                for j in 1..theta.len() {
                    let t = theta[j];
                    grad[j] += lambda * t / (t * t + epsilon * epsilon).sqrt();
                }
            }
        }
    }

    /// Hessian contribution (diagonal), zero on the intercept.
    pub fn add_hessian(&self, theta: &Array1<T>, hess: &mut Array2<T>) {
        match *self {
            PenaltySpec::None => {}
            PenaltySpec::Ridge { lambda } => {
                for j in 1..theta.len() {
                    hess[[j, j]] += lambda;
                }
            }
            PenaltySpec::SmoothedL1 { lambda, epsilon } => {
                for j in 1..theta.len() {
                    let t = theta[j];
                    let s = (t * t + epsilon * epsilon).sqrt();
                    hess[[j, j]] += lambda * epsilon * epsilon / (s * s * s);
                }
            }
        }
    }
}

/// Newton solver settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig<T> {
    pub max_iterations: usize,
    pub gradient_tolerance: T,
    /// Damping added to the Hessian diagonal before each Newton solve.
    pub hessian_damping: T,
}

impl<T: Scalar> Default for SolverConfig<T> {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            gradient_tolerance: T::of(1e-8),
            hessian_damping: T::of(1e-8),
        }
    }
}

impl<T: Scalar> SolverConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::Size("max_iterations must be at least 1".into()));
        }
        if !(self.gradient_tolerance > T::zero()) {
            return Err(Error::Domain("gradient_tolerance must be positive".into()));
        }
        if self.hessian_damping < T::zero() {
            return Err(Error::Domain("hessian_damping must be non-negative".into()));
        }
        Ok(())
    }
}

/// Outcome of an iterative fit.
#[derive(Debug, Clone)]
pub struct FitResult<T> {
    pub theta: ParameterVector<T>,
    pub final_loss: T,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: T,
}

fn validate_weights<T: Scalar>(weights: &[T], n: usize) -> Result<()> {
    if weights.len() != n {
        return Err(Error::Size(format!(
            "{} weights for {} observations",
            weights.len(),
            n
        )));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < T::zero()) {
        return Err(Error::Domain("weights must be finite and non-negative".into()));
    }
    if weights.iter().all(|w| *w == T::zero()) {
        return Err(Error::Domain("weights must not all be zero".into()));
    }
    Ok(())
}

/// Weighted least squares: solves `(X' W X + damping I) beta = X' W y`.
/// With zero damping this is the exact normal-equation estimator; a
/// numerically singular Gram matrix (1-norm condition estimate above
/// `1/eps`) is an error rather than a silently regularized fit.
pub fn wls_fit<T: Scalar>(
    data: &GroupedDataset<T>,
    weights: &[T],
    damping: T,
) -> Result<ParameterVector<T>> {
    validate_weights(weights, data.len())?;
    if damping < T::zero() {
        return Err(Error::Domain("damping must be non-negative".into()));
    }
    let x = data.features();
    let y = data.targets();
    let (n, d) = (x.nrows(), x.ncols());
    let mut gram = Array2::<T>::zeros((d, d));
    let mut xty = Array1::<T>::zeros(d);
    for i in 0..n {
        let w = weights[i];
        if w == T::zero() {
            continue;
        }
        let row = x.row(i);
        for a in 0..d {
            let wa = w * row[a];
            xty[a] += wa * y[i];
            for b in a..d {
                gram[[a, b]] += wa * row[b];
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            gram[[a, b]] = gram[[b, a]];
        }
        gram[[a, a]] += damping;
    }
    let factor = cholesky(&gram).ok_or(Error::SingularDesign { condition: f64::INFINITY })?;
    if damping == T::zero() {
        let cond = condition_1norm(&gram, &factor);
        if cond > T::epsilon().recip() {
            return Err(Error::SingularDesign { condition: cond.to_f64_lossy() });
        }
    }
    ParameterVector::new(factor.solve_refined(&gram, &xty))
}

fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Stable `log(1 + exp(z)) - y z`.
fn log_loss<T: Scalar>(y: T, z: T) -> T {
    z.max(T::zero()) + (-z.abs()).exp().ln_1p() - y * z
}

fn check_classification<T: Scalar>(data: &GroupedDataset<T>) -> Result<()> {
    if !data.has_binary_targets() {
        return Err(Error::Domain("targets must be binary 0/1 labels".into()));
    }
    Ok(())
}

/// Weighted penalized logistic loss
/// `(1/n) sum_i w_i l(y_i, sigmoid(x_i' theta)) + penalty(theta)`.
pub fn weighted_logistic_loss<T: Scalar>(
    theta: &ParameterVector<T>,
    data: &GroupedDataset<T>,
    weights: &[T],
    penalty: &PenaltySpec<T>,
) -> Result<T> {
    check_classification(data)?;
    validate_weights(weights, data.len())?;
    let z = data.features().dot(theta.coefficients());
    let mut total = T::zero();
    for i in 0..data.len() {
        total += weights[i] * log_loss(data.targets()[i], z[i]);
    }
    Ok(total / T::from_count(data.len()) + penalty.value(theta.coefficients()))
}

/// Analytic gradient of [`weighted_logistic_loss`] in `theta`.
pub fn logistic_gradient<T: Scalar>(
    theta: &ParameterVector<T>,
    data: &GroupedDataset<T>,
    weights: &[T],
    penalty: &PenaltySpec<T>,
) -> Result<Array1<T>> {
    check_classification(data)?;
    validate_weights(weights, data.len())?;
    let x = data.features();
    let z = x.dot(theta.coefficients());
    let n = data.len();
    let d = x.ncols();
    let mut grad = Array1::<T>::zeros(d);
    for i in 0..n {
        let w = weights[i];
        if w == T::zero() {
            continue;
        }
        let resid = w * (sigmoid(z[i]) - data.targets()[i]);
        let row = x.row(i);
        for j in 0..d {
            grad[j] += resid * row[j];
        }
    }
    let nf = T::from_count(n);
    grad.mapv_inplace(|g| g / nf);
    penalty.add_gradient(theta.coefficients(), &mut grad);
    Ok(grad)
}

/// Analytic Hessian of [`weighted_logistic_loss`] in `theta`.
pub fn logistic_hessian<T: Scalar>(
    theta: &ParameterVector<T>,
    data: &GroupedDataset<T>,
    weights: &[T],
    penalty: &PenaltySpec<T>,
) -> Result<Array2<T>> {
    check_classification(data)?;
    validate_weights(weights, data.len())?;
    let x = data.features();
    let z = x.dot(theta.coefficients());
    let n = data.len();
    let d = x.ncols();
    let mut hess = Array2::<T>::zeros((d, d));
    for i in 0..n {
        let w = weights[i];
        if w == T::zero() {
            continue;
        }
        let s = sigmoid(z[i]);
        let c = w * s * (T::one() - s);
        if c == T::zero() {
            continue;
        }
        let row = x.row(i);
        for a in 0..d {
            let ca = c * row[a];
            for b in a..d {
                hess[[a, b]] += ca * row[b];
            }
        }
    }
    let nf = T::from_count(n);
    for a in 0..d {
        for b in a..d {
            hess[[a, b]] = hess[[a, b]] / nf;
            hess[[b, a]] = hess[[a, b]];
        }
    }
    penalty.add_hessian(theta.coefficients(), &mut hess);
    Ok(hess)
}

/// Norm above which an unpenalized fit is declared separable.
const SEPARABLE_GUARD: f64 = 1e4;

/// True when every positively weighted observation is classified with a
/// strictly positive margin, which certifies linear separability (and hence
/// that the unpenalized objective has no minimizer).
fn separates<T: Scalar>(theta: &Array1<T>, data: &GroupedDataset<T>, weights: &[T]) -> bool {
    let z = data.features().dot(theta);
    let mut any = false;
    for i in 0..data.len() {
        if weights[i] == T::zero() {
            continue;
        }
        let sign = T::of(2.0) * data.targets()[i] - T::one();
        if sign * z[i] <= T::zero() {
            return false;
        }
        any = true;
    }
    any
}

/// Damped-Newton fit of the weighted penalized logistic objective from a
/// zero start. Full batch and deterministic. Returns with
/// `converged = false` when the iteration budget runs out; diverging
/// coefficients without a penalty raise `SeparableData`.
pub fn logistic_fit<T: Scalar>(
    data: &GroupedDataset<T>,
    weights: &[T],
    penalty: &PenaltySpec<T>,
    config: &SolverConfig<T>,
) -> Result<FitResult<T>> {
    logistic_fit_warm(data, weights, penalty, config, ParameterVector::zeros(data.dim()))
}

/// [`logistic_fit`] from an explicit starting point (used by the outer
/// loops to warm-start each refit; the result is still verified against the
/// gradient tolerance, so warm starts affect speed only).
pub fn logistic_fit_warm<T: Scalar>(
    data: &GroupedDataset<T>,
    weights: &[T],
    penalty: &PenaltySpec<T>,
    config: &SolverConfig<T>,
    start: ParameterVector<T>,
) -> Result<FitResult<T>> {
    check_classification(data)?;
    validate_weights(weights, data.len())?;
    penalty.validate()?;
    config.validate()?;
    if start.len() != data.dim() {
        return Err(Error::Size("starting point has wrong dimension".into()));
    }
    // The unpenalized objective has no minimizer when some class carries no
    // weight; fail fast instead of diverging.
    if matches!(penalty, PenaltySpec::None) {
        let mut pos = T::zero();
        let mut neg = T::zero();
        for i in 0..data.len() {
            if data.targets()[i] == T::one() {
                pos += weights[i];
            } else {
                neg += weights[i];
            }
        }
        if pos == T::zero() || neg == T::zero() {
            return Err(Error::SeparableData { norm: f64::INFINITY });
        }
    }

    let mut theta = start.into_inner();
    let mut loss = weighted_logistic_loss(
        &ParameterVector::new(theta.clone())?,
        data,
        weights,
        penalty,
    )?;
    let mut iterations = 0usize;
    let mut grad_norm;
    loop {
        let theta_pv = ParameterVector::new(theta.clone())?;
        let grad = logistic_gradient(&theta_pv, data, weights, penalty)?;
        grad_norm = grad.iter().map(|g| *g * *g).sum::<T>().sqrt();
        if grad_norm <= config.gradient_tolerance {
            if matches!(penalty, PenaltySpec::None) && separates(&theta, data, weights) {
                let norm = theta.iter().map(|t| *t * *t).sum::<T>().sqrt();
                return Err(Error::SeparableData { norm: norm.to_f64_lossy() });
            }
            return Ok(FitResult {
                theta: theta_pv,
                final_loss: loss,
                converged: true,
                iterations,
                gradient_norm: grad_norm,
            });
        }
        if iterations >= config.max_iterations {
            return Ok(FitResult {
                theta: theta_pv,
                final_loss: loss,
                converged: false,
                iterations,
                gradient_norm: grad_norm,
            });
        }
        let mut hess = logistic_hessian(&theta_pv, data, weights, penalty)?;
        for j in 0..hess.nrows() {
            hess[[j, j]] += config.hessian_damping;
        }
        let factor =
            cholesky(&hess).ok_or(Error::SingularDesign { condition: f64::INFINITY })?;
        let step = factor.solve(&grad);
        let descent: T = grad.iter().zip(step.iter()).map(|(&g, &s)| g * s).sum();

        // Near the optimum the per-step loss decrease drops below float
        // resolution, so Armijo cannot certify descent; take the pure
        // Newton step there (quadratic-convergence zone of a convex
        // objective), and backtrack everywhere else.
        let quadratic_zone = grad_norm <= T::of(1e-6) * (T::one() + loss.abs());
        let mut accepted = false;
        if quadratic_zone {
            theta = &theta - &step;
            let cand_pv = ParameterVector::new(theta.clone())?;
            loss = weighted_logistic_loss(&cand_pv, data, weights, penalty)?;
            accepted = true;
        } else {
            let mut t = T::one();
            for _ in 0..60 {
                let candidate = &theta - &step.mapv(|s| s * t);
                let cand_pv = ParameterVector::new(candidate.clone())?;
                let cand_loss = weighted_logistic_loss(&cand_pv, data, weights, penalty)?;
                if cand_loss <= loss - T::of(1e-4) * t * descent {
                    theta = candidate;
                    loss = cand_loss;
                    accepted = true;
                    break;
                }
                t = t / T::of(2.0);
            }
        }
        iterations += 1;
        if !accepted {
            // Line search stalled at numerical precision.
            let theta_pv = ParameterVector::new(theta.clone())?;
            let grad = logistic_gradient(&theta_pv, data, weights, penalty)?;
            grad_norm = grad.iter().map(|g| *g * *g).sum::<T>().sqrt();
            return Ok(FitResult {
                converged: grad_norm <= config.gradient_tolerance,
                theta: theta_pv,
                final_loss: loss,
                iterations,
                gradient_norm: grad_norm,
            });
        }
        if matches!(penalty, PenaltySpec::None) {
            let norm = theta.iter().map(|t| *t * *t).sum::<T>().sqrt();
            if norm > T::of(SEPARABLE_GUARD) {
                return Err(Error::SeparableData { norm: norm.to_f64_lossy() });
            }
        }
    }
}

/// Subsample count `m_g = ceil(v_g n_g)` per group and the total `m`.
pub fn subsample_counts<T: Scalar>(
    v: &SubsampleFractions<T>,
    group_counts: &[usize],
) -> (Vec<usize>, usize) {
    let counts: Vec<usize> = v
        .values()
        .iter()
        .zip(group_counts)
        .map(|(&vg, &ng)| {
            let m = (vg * T::from_count(ng)).ceil().to_usize().unwrap_or(0);
            m.min(ng)
        })
        .collect();
    let total = counts.iter().sum();
    (counts, total)
}

/// Expected training loss under random per-group subsampling, in relaxed
/// form: `(1/m) sum_g v_g sum_{i in g} l_i` with `m = sum_g ceil(v_g n_g)`.
/// On instances where every `v_g n_g` is integral this equals the exact
/// average over all subsample draws.
pub fn subg_expected_loss<T: Scalar>(
    theta: &ParameterVector<T>,
    data: &GroupedDataset<T>,
    v: &SubsampleFractions<T>,
) -> Result<T> {
    check_classification(data)?;
    if v.num_groups() != data.num_groups() {
        return Err(Error::Size("fraction vector does not match group count".into()));
    }
    let (_, m) = subsample_counts(v, data.group_counts());
    if m == 0 {
        return Err(Error::Size("subsample is empty".into()));
    }
    let z = data.features().dot(theta.coefficients());
    let mut total = T::zero();
    for i in 0..data.len() {
        let vg = v.for_group(data.groups()[i]);
        total += vg * log_loss(data.targets()[i], z[i]);
    }
    Ok(total / T::from_count(m))
}

/// Per-observation weights that make `(1/n) sum w_i l_i` equal the relaxed
/// subsampling objective `(1/m) sum_g v_g sum_{i in g} l_i`.
pub fn subg_relaxed_weights<T: Scalar>(
    v: &SubsampleFractions<T>,
    data: &GroupedDataset<T>,
) -> Result<Vec<T>> {
    if v.num_groups() != data.num_groups() {
        return Err(Error::Size("fraction vector does not match group count".into()));
    }
    let (_, m) = subsample_counts(v, data.group_counts());
    if m == 0 {
        return Err(Error::Size("subsample is empty".into()));
    }
    let scale = T::from_count(data.len()) / T::from_count(m);
    Ok(data.groups().iter().map(|&g| v.for_group(g) * scale).collect())
}

/// Fit the relaxed subsampling objective (plus penalty) by weighted
/// logistic regression.
pub fn subg_relaxed_fit<T: Scalar>(
    data: &GroupedDataset<T>,
    v: &SubsampleFractions<T>,
    penalty: &PenaltySpec<T>,
    config: &SolverConfig<T>,
) -> Result<FitResult<T>> {
    let weights = subg_relaxed_weights(v, data)?;
    logistic_fit(data, &weights, penalty, config)
}

/// Warm-started variant of [`subg_relaxed_fit`].
pub fn subg_relaxed_fit_warm<T: Scalar>(
    data: &GroupedDataset<T>,
    v: &SubsampleFractions<T>,
    penalty: &PenaltySpec<T>,
    config: &SolverConfig<T>,
    start: ParameterVector<T>,
) -> Result<FitResult<T>> {
    let weights = subg_relaxed_weights(v, data)?;
    logistic_fit_warm(data, &weights, penalty, config, start)
}

/// Draw `ceil(v_g n_g)` rows per group without replacement, deterministic
/// per seed. Returns sorted row indices.
pub fn draw_subsample<T: Scalar>(
    data: &GroupedDataset<T>,
    v: &SubsampleFractions<T>,
    seed: u64,
) -> Result<Vec<usize>> {
    if v.num_groups() != data.num_groups() {
        return Err(Error::Size("fraction vector does not match group count".into()));
    }
    let (counts, m) = subsample_counts(v, data.group_counts());
    if m == 0 {
        return Err(Error::Size("subsample is empty".into()));
    }
    let mut rng = rng_from_seed(seed);
    let mut rows = Vec::with_capacity(m);
    for g in 1..=data.num_groups() {
        let take = counts[g - 1];
        if take == 0 {
            continue;
        }
        let mut group_rows = data.group_rows(g);
        if group_rows.is_empty() {
            return Err(Error::EmptyGroup { group: g });
        }
        group_rows.shuffle(&mut rng);
        rows.extend_from_slice(&group_rows[..take]);
    }
    rows.sort_unstable();
    Ok(rows)
}

/// Ensemble of logistic fits on independent per-group subsamples, averaged
/// in coefficient space. Every group with a positive fraction must be
/// non-empty. Deterministic per seed.
pub fn dfr_ensemble_fit<T: Scalar>(
    data: &GroupedDataset<T>,
    v: &SubsampleFractions<T>,
    ensemble_size: usize,
    penalty: &PenaltySpec<T>,
    config: &SolverConfig<T>,
    seed: u64,
) -> Result<ParameterVector<T>> {
    if ensemble_size == 0 {
        return Err(Error::Size("ensemble_size must be at least 1".into()));
    }
    for g in 1..=data.num_groups() {
        if v.for_group(g) > T::zero() && data.group_count(g) == 0 {
            return Err(Error::EmptyGroup { group: g });
        }
    }
    let mut mean = Array1::<T>::zeros(data.dim());
    for member in 0..ensemble_size {
        let rows = draw_subsample(data, v, crate::seed::derive_seed(seed, member as u64))?;
        let subset = data.subset(&rows)?;
        let ones = vec![T::one(); subset.len()];
        let fit = logistic_fit(&subset, &ones, penalty, config)?;
        mean += fit.theta.coefficients();
    }
    let k = T::from_count(ensemble_size);
    mean.mapv_inplace(|c| c / k);
    ParameterVector::new(mean)
}

/// Per-group classification accuracy at threshold 0.5; groups with no
/// observations are `None` (undefined, distinct from zero accuracy).
pub fn accuracy_by_group<T: Scalar>(
    theta: &ParameterVector<T>,
    data: &GroupedDataset<T>,
) -> Result<Vec<Option<T>>> {
    check_classification(data)?;
    let z = data.features().dot(theta.coefficients());
    let mut correct = vec![0usize; data.num_groups()];
    for i in 0..data.len() {
        let pred = if z[i] >= T::zero() { T::one() } else { T::zero() };
        if pred == data.targets()[i] {
            correct[data.groups()[i] - 1] += 1;
        }
    }
    Ok(correct
        .iter()
        .zip(data.group_counts())
        .map(|(&c, &n)| (n > 0).then(|| T::from_count(c) / T::from_count(n)))
        .collect())
}
