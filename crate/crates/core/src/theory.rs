//! Closed-form bias-variance theory for two-group weighted least squares.
//!
//! The data-generating process has two groups that share slope coefficients
//! and differ only in the intercept (`a1` for group 1, `a0` for group 2),
//! standard-normal features, and a group-1 training frequency `p_train`.
//! Fitting WLS with per-observation weights `p/p_train` (group 1) and
//! `(1-p)/(1-p_train)` (group 2) gives, for large `n`, an expected test risk
//! that decomposes into a squared bias minimized at `p = p_test` and a
//! variance minimized at `p = p_train`. The optimum interpolates:
//!
//! ```text
//! p*(n) = (p_test + eta * p_train) / (1 + eta),
//! eta   = sigma^2 (d+1) / (n (a1-a0)^2 p_train (1-p_train))
//! ```
//!
//! `p*` is a large-`n` approximation; the Monte Carlo simulator in this
//! module quantifies its accuracy at finite `n`.

use crate::data::{GroupedDataset, ParameterVector};
use crate::error::{Error, Result};
use crate::estimators::wls_fit;
use crate::scalar::Scalar;
use crate::seed::{derive_seed, rng_from_seed};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

/// Two-group linear-regression data-generating process. Dataset group 1
/// carries intercept `a1` and training frequency `p_train`; group 2 carries
/// intercept `a0`. Feature covariance is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct LinRegDGP<T> {
    a1: T,
    a0: T,
    beta: Array1<T>,
    sigma2: T,
    p_train: T,
}

impl<T: Scalar> LinRegDGP<T> {
    pub fn new(a1: T, a0: T, beta: Array1<T>, sigma2: T, p_train: T) -> Result<Self> {
        if !(sigma2 > T::zero()) {
            return Err(Error::Domain("sigma2 must be positive".into()));
        }
        if !(p_train > T::zero() && p_train < T::one()) {
            return Err(Error::Domain("p_train must lie strictly inside (0, 1)".into()));
        }
        if beta.iter().any(|v| !v.is_finite()) || !a1.is_finite() || !a0.is_finite() {
            return Err(Error::Domain("non-finite DGP coefficient".into()));
        }
        Ok(Self { a1, a0, beta, sigma2, p_train })
    }

    /// DGP with zero slopes in `d` feature dimensions. The expected risk of
    /// the WLS fit does not depend on the slope values, so this is the
    /// standard configuration for simulations.
    pub fn with_zero_slopes(a1: T, a0: T, sigma2: T, d: usize, p_train: T) -> Result<Self> {
        Self::new(a1, a0, Array1::zeros(d), sigma2, p_train)
    }

    pub fn a1(&self) -> T {
        self.a1
    }

    pub fn a0(&self) -> T {
        self.a0
    }

    pub fn beta(&self) -> &Array1<T> {
        &self.beta
    }

    pub fn sigma2(&self) -> T {
        self.sigma2
    }

    pub fn p_train(&self) -> T {
        self.p_train
    }

    /// Feature dimension (excluding the intercept column).
    pub fn dim(&self) -> usize {
        self.beta.len()
    }

    /// Draw a dataset with deterministic group counts: exactly
    /// `round(n * p_train)` rows in group 1, the rest in group 2. Features
    /// are an intercept column plus `d` standard-normal columns.
    pub fn sample(&self, n: usize, seed: u64) -> Result<GroupedDataset<T>> {
        if n < 2 {
            return Err(Error::Size("need at least 2 observations".into()));
        }
        let n1 = (T::from_count(n) * self.p_train)
            .round()
            .to_usize()
            .unwrap_or(0);
        if n1 == 0 || n1 >= n {
            return Err(Error::Size(format!(
                "group counts ({}, {}) would leave a group empty",
                n1,
                n - n1
            )));
        }
        let d = self.dim();
        let mut rng = rng_from_seed(seed);
        let mut features = Array2::<T>::zeros((n, d + 1));
        let mut targets = Array1::<T>::zeros(n);
        let mut groups = Vec::with_capacity(n);
        for i in 0..n {
            let group = if i < n1 { 1 } else { 2 };
            let a = if group == 1 { self.a1 } else { self.a0 };
            features[[i, 0]] = T::one();
            let mut xb = T::zero();
            for j in 0..d {
                let x = T::of(rng.sample::<f64, _>(StandardNormal));
                features[[i, j + 1]] = x;
                xb += x * self.beta[j];
            }
            let noise = T::of(rng.sample::<f64, _>(StandardNormal)) * self.sigma2.sqrt();
            targets[i] = a + xb + noise;
            groups.push(group);
        }
        GroupedDataset::new(features, targets, groups, 2)
    }

    /// Per-observation WLS weights for a scalar group-1 weight `p`.
    pub fn wls_weights(&self, p: T, groups: &[usize]) -> Vec<T> {
        let w1 = p / self.p_train;
        let w0 = (T::one() - p) / (T::one() - self.p_train);
        groups.iter().map(|&g| if g == 1 { w1 } else { w0 }).collect()
    }
}

/// One point of the theoretical risk curve.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoryPoint<T> {
    /// Group-1 weight parameter.
    pub p: T,
    pub bias_sq: T,
    pub variance: T,
    /// `bias_sq + variance + sigma2`.
    pub expected_loss: T,
    /// The variance/bias trade-off ratio `eta`; infinite when `a1 == a0`.
    pub variance_bias_ratio: T,
}

/// Squared bias `[p_test (1-p)^2 + (1-p_test) p^2] (a1-a0)^2`.
pub fn bias_squared<T: Scalar>(p_test: T, p: T, a1: T, a0: T) -> T {
    let q = T::one() - p;
    let gap = a1 - a0;
    (p_test * q * q + (T::one() - p_test) * p * p) * gap * gap
}

/// Variance `sigma2 [p^2/p_train + (1-p)^2/(1-p_train)] (d+1)/n`.
pub fn variance_term<T: Scalar>(sigma2: T, p: T, p_train: T, n: usize, d: usize) -> Result<T> {
    if p_train <= T::zero() || p_train >= T::one() {
        return Err(Error::Domain("p_train must lie strictly inside (0, 1)".into()));
    }
    if n == 0 {
        return Err(Error::Size("n must be at least 1".into()));
    }
    let q = T::one() - p;
    let bracket = p * p / p_train + q * q / (T::one() - p_train);
    Ok(sigma2 * bracket * T::from_count(d + 1) / T::from_count(n))
}

/// The trade-off ratio `eta = sigma2 (d+1) / (n (a1-a0)^2 p_train (1-p_train))`;
/// infinite when `a1 == a0`.
pub fn variance_bias_ratio<T: Scalar>(dgp: &LinRegDGP<T>, n: usize) -> T {
    let gap = dgp.a1 - dgp.a0;
    if gap == T::zero() {
        return T::infinity();
    }
    dgp.sigma2 * T::from_count(dgp.dim() + 1)
        / (T::from_count(n) * gap * gap * dgp.p_train * (T::one() - dgp.p_train))
}

/// Large-`n` approximate expected test loss at weight `p`.
pub fn expected_loss_approx<T: Scalar>(
    dgp: &LinRegDGP<T>,
    p_test: T,
    p: T,
    n: usize,
) -> Result<TheoryPoint<T>> {
    let bias_sq = bias_squared(p_test, p, dgp.a1, dgp.a0);
    let variance = variance_term(dgp.sigma2, p, dgp.p_train, n, dgp.dim())?;
    Ok(TheoryPoint {
        p,
        bias_sq,
        variance,
        expected_loss: bias_sq + variance + dgp.sigma2,
        variance_bias_ratio: variance_bias_ratio(dgp, n),
    })
}

/// Minimizer of the approximate expected loss:
/// `(p_test + eta p_train) / (1 + eta)`. When `a1 == a0` the bias vanishes
/// identically and the variance minimizer `p_train` is returned.
pub fn optimal_weight<T: Scalar>(dgp: &LinRegDGP<T>, p_test: T, n: usize) -> Result<T> {
    if n == 0 {
        return Err(Error::Size("n must be at least 1".into()));
    }
    if dgp.a1 == dgp.a0 {
        return Ok(dgp.p_train);
    }
    let eta = variance_bias_ratio(dgp, n);
    Ok((p_test + eta * dgp.p_train) / (T::one() + eta))
}

/// Optimal weight evaluated over a grid of sample sizes.
pub fn optimal_weight_curve<T: Scalar>(
    dgp: &LinRegDGP<T>,
    p_test: T,
    n_grid: &[usize],
) -> Result<Vec<(usize, T)>> {
    if n_grid.is_empty() {
        return Err(Error::Size("n_grid must be non-empty".into()));
    }
    n_grid
        .iter()
        .map(|&n| optimal_weight(dgp, p_test, n).map(|p| (n, p)))
        .collect()
}

/// Exact expected test risk of fixed coefficients under the DGP:
/// `sum_g P_test(g) (a_g - theta_0)^2 + ||beta - theta_1..||^2 + sigma2`.
/// Cross terms vanish because the features are centered isotropic normals.
pub fn conditional_test_risk<T: Scalar>(
    beta_hat: &ParameterVector<T>,
    dgp: &LinRegDGP<T>,
    p_test: T,
) -> Result<T> {
    let d = dgp.dim();
    if beta_hat.len() != d + 1 {
        return Err(Error::Size(format!(
            "coefficient vector has length {}, expected {}",
            beta_hat.len(),
            d + 1
        )));
    }
    let theta = beta_hat.coefficients();
    let int_err_1 = dgp.a1 - theta[0];
    let int_err_0 = dgp.a0 - theta[0];
    let mut slope_err = T::zero();
    for j in 0..d {
        let e = dgp.beta[j] - theta[j + 1];
        slope_err += e * e;
    }
    Ok(p_test * int_err_1 * int_err_1
        + (T::one() - p_test) * int_err_0 * int_err_0
        + slope_err
        + dgp.sigma2)
}

/// Monte Carlo estimate of the test risk of fixed coefficients, used to
/// cross-check [`conditional_test_risk`]. Returns `(mean, standard error)`.
pub fn empirical_test_risk<T: Scalar>(
    beta_hat: &ParameterVector<T>,
    dgp: &LinRegDGP<T>,
    p_test: T,
    n_samples: usize,
    seed: u64,
) -> Result<(T, T)> {
    if n_samples < 2 {
        return Err(Error::Size("need at least 2 test samples".into()));
    }
    let d = dgp.dim();
    if beta_hat.len() != d + 1 {
        return Err(Error::Size("coefficient length mismatch".into()));
    }
    let theta = beta_hat.coefficients();
    let mut rng = rng_from_seed(seed);
    let mut sum = T::zero();
    let mut sum_sq = T::zero();
    for _ in 0..n_samples {
        let u: f64 = rng.random();
        let a = if T::of(u) < p_test { dgp.a1 } else { dgp.a0 };
        let mut pred = theta[0];
        let mut mean = a;
        for j in 0..d {
            let x = T::of(rng.sample::<f64, _>(StandardNormal));
            pred += theta[j + 1] * x;
            mean += dgp.beta[j] * x;
        }
        let y = mean + T::of(rng.sample::<f64, _>(StandardNormal)) * dgp.sigma2.sqrt();
        let e = y - pred;
        sum += e * e;
        sum_sq += e * e * e * e;
    }
    let nf = T::from_count(n_samples);
    let mean = sum / nf;
    let var = (sum_sq / nf - mean * mean) / (nf - T::one());
    Ok((mean, var.max(T::zero()).sqrt()))
}

/// Simulated risk at one grid weight.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedPoint<T> {
    pub p: T,
    pub mean_risk: T,
    pub standard_error: T,
    /// Replications skipped because the weighted design was singular.
    pub singular_failures: usize,
}

/// Simulation summary over a weight grid.
#[derive(Debug, Clone)]
pub struct MseSimulation<T> {
    pub points: Vec<SimulatedPoint<T>>,
    pub replications: usize,
}

/// Simulate the expected test risk of the WLS fit over a grid of weights.
///
/// Each replication draws a fresh training set (one independent seed per
/// replication, shared across the grid so the curve uses common random
/// numbers), fits WLS at every grid weight, and evaluates the exact
/// conditional test risk of the fitted coefficients. Singular fits are
/// counted per grid point and tolerated up to 1% of replications.
/// Replications run in parallel; per-replication results are reduced in
/// index order, so identical seeds give bitwise-identical means.
pub fn simulate_mse<T: Scalar>(
    dgp: &LinRegDGP<T>,
    p_test: T,
    p_grid: &[T],
    n: usize,
    replications: usize,
    seed: u64,
) -> Result<MseSimulation<T>> {
    if replications < 2 {
        return Err(Error::Size("need at least 2 replications for a standard error".into()));
    }
    if p_grid.is_empty() {
        return Err(Error::Size("p_grid must be non-empty".into()));
    }
    if p_grid.iter().any(|&p| p < T::zero() || p > T::one()) {
        return Err(Error::Domain("grid weights must lie in [0, 1]".into()));
    }
    let per_rep: Vec<Vec<Option<T>>> = (0..replications)
        .into_par_iter()
        .map(|rep| {
            let data = dgp.sample(n, derive_seed(seed, rep as u64))?;
            let mut risks = Vec::with_capacity(p_grid.len());
            for &p in p_grid {
                let weights = dgp.wls_weights(p, data.groups());
                match wls_fit(&data, &weights, T::zero()) {
                    Ok(beta_hat) => {
                        risks.push(Some(conditional_test_risk(&beta_hat, dgp, p_test)?))
                    }
                    Err(Error::SingularDesign { .. }) => risks.push(None),
                    Err(e) => return Err(e),
                }
            }
            Ok(risks)
        })
        .collect::<Result<_>>()?;

    let mut points = Vec::with_capacity(p_grid.len());
    for (k, &p) in p_grid.iter().enumerate() {
        let mut sum = T::zero();
        let mut count = 0usize;
        for rep in &per_rep {
            if let Some(r) = rep[k] {
                sum += r;
                count += 1;
            }
        }
        let failures = replications - count;
        if failures * 100 > replications {
            return Err(Error::SingularDesign { condition: f64::INFINITY });
        }
        if count < 2 {
            return Err(Error::Size("too few successful replications".into()));
        }
        let mean = sum / T::from_count(count);
        let mut ss = T::zero();
        for rep in &per_rep {
            if let Some(r) = rep[k] {
                let e = r - mean;
                ss += e * e;
            }
        }
        let var = ss / T::from_count(count - 1);
        points.push(SimulatedPoint {
            p,
            mean_risk: mean,
            standard_error: (var / T::from_count(count)).sqrt(),
            singular_failures: failures,
        });
    }
    Ok(MseSimulation { points, replications })
}
