//! Weight algebra: shift specifications, likelihood ratios, simplex weights
//! and subsample fractions, and their induced per-observation weights.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

/// Construction tolerance on probability sums.
pub const SUM_TOL_CONSTRUCT: f64 = 1e-12;
/// Tolerance on probability sums after arithmetic (long multiplicative runs).
pub const SUM_TOL_ARITH: f64 = 1e-9;

/// Marginal group probabilities under the training and test distributions.
///
/// Both vectors must be non-negative and sum to one. Whether every group
/// needed at test time has training support is checked by the operations
/// that divide by `p_train`, so that a violation surfaces as
/// [`Error::SupportViolation`] where the ratio is actually formed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec<T> {
    p_train: Vec<T>,
    p_test: Vec<T>,
}

fn check_probability_vector<T: Scalar>(p: &[T], name: &str) -> Result<()> {
    if p.is_empty() {
        return Err(Error::Size(format!("{name} must be non-empty")));
    }
    if p.iter().any(|v| !v.is_finite() || *v < T::zero()) {
        return Err(Error::Domain(format!("{name} must be non-negative and finite")));
    }
    let sum: T = p.iter().copied().sum();
    if (sum - T::one()).abs() > T::of(SUM_TOL_CONSTRUCT) {
        return Err(Error::Domain(format!(
            "{name} must sum to 1 within {SUM_TOL_CONSTRUCT:e}; got {sum}"
        )));
    }
    Ok(())
}

impl<T: Scalar> ShiftSpec<T> {
    pub fn new(p_train: Vec<T>, p_test: Vec<T>) -> Result<Self> {
        check_probability_vector(&p_train, "p_train")?;
        check_probability_vector(&p_test, "p_test")?;
        if p_train.len() != p_test.len() {
            return Err(Error::Size(format!(
                "p_train has {} groups but p_test has {}",
                p_train.len(),
                p_test.len()
            )));
        }
        Ok(Self { p_train, p_test })
    }

    /// The no-shift specification over `num_groups` groups.
    pub fn identity(num_groups: usize) -> Self {
        let u = vec![T::one() / T::from_count(num_groups); num_groups];
        Self { p_train: u.clone(), p_test: u }
    }

    /// Two-group specification from the scalar probabilities of group 1.
    pub fn two_group(p_train_1: T, p_test_1: T) -> Result<Self> {
        Self::new(
            vec![p_train_1, T::one() - p_train_1],
            vec![p_test_1, T::one() - p_test_1],
        )
    }

    pub fn num_groups(&self) -> usize {
        self.p_train.len()
    }

    pub fn p_train(&self) -> &[T] {
        &self.p_train
    }

    pub fn p_test(&self) -> &[T] {
        &self.p_test
    }
}

/// Per-group ratios `r_g = p_test(g) / p_train(g)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodRatios<T> {
    r: Vec<T>,
}

impl<T: Scalar> LikelihoodRatios<T> {
    pub fn values(&self) -> &[T] {
        &self.r
    }

    pub fn num_groups(&self) -> usize {
        self.r.len()
    }

    /// Ratio for a 1-based group label.
    pub fn for_group(&self, group: usize) -> T {
        self.r[group - 1]
    }
}

/// `r_g = p_test(g)/p_train(g)`, with `0/0` defined as zero. Errors when a
/// group has positive test probability but zero training probability.
pub fn likelihood_ratios<T: Scalar>(shift: &ShiftSpec<T>) -> Result<LikelihoodRatios<T>> {
    let mut r = Vec::with_capacity(shift.num_groups());
    for (g, (&tr, &te)) in shift.p_train.iter().zip(&shift.p_test).enumerate() {
        if tr == T::zero() {
            if te > T::zero() {
                return Err(Error::SupportViolation { group: g + 1 });
            }
            r.push(T::zero());
        } else {
            r.push(te / tr);
        }
    }
    Ok(LikelihoodRatios { r })
}

/// Group weights constrained to the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimplexWeights<T> {
    p: Vec<T>,
}

impl<T: Scalar> SimplexWeights<T> {
    /// Validate an already-normalized vector at construction tolerance.
    pub fn new(p: Vec<T>) -> Result<Self> {
        check_probability_vector(&p, "simplex weights")?;
        Ok(Self { p })
    }

    /// Uniform weights over `num_groups` groups.
    pub fn uniform(num_groups: usize) -> Self {
        Self { p: vec![T::one() / T::from_count(num_groups); num_groups] }
    }

    pub fn values(&self) -> &[T] {
        &self.p
    }

    pub fn num_groups(&self) -> usize {
        self.p.len()
    }

    /// Weight for a 1-based group label.
    pub fn for_group(&self, group: usize) -> T {
        self.p[group - 1]
    }
}

/// Normalize a non-negative vector onto the simplex. Errors when the vector
/// is all-zero or contains a negative or non-finite entry.
pub fn normalize_simplex<T: Scalar>(raw: &[T]) -> Result<SimplexWeights<T>> {
    if raw.is_empty() {
        return Err(Error::DegenerateWeights("empty weight vector".into()));
    }
    if raw.iter().any(|v| !v.is_finite() || *v < T::zero()) {
        return Err(Error::DegenerateWeights(
            "weights must be non-negative and finite".into(),
        ));
    }
    let sum: T = raw.iter().copied().sum();
    if sum <= T::zero() {
        return Err(Error::DegenerateWeights("all weights are zero".into()));
    }
    Ok(SimplexWeights { p: raw.iter().map(|&v| v / sum).collect() })
}

/// Per-group subsample fractions; at least one must equal one so no training
/// data is discarded unnecessarily.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsampleFractions<T> {
    v: Vec<T>,
}

impl<T: Scalar> SubsampleFractions<T> {
    pub fn new(v: Vec<T>) -> Result<Self> {
        if v.is_empty() {
            return Err(Error::Size("fractions must be non-empty".into()));
        }
        if v.iter().any(|x| !x.is_finite() || *x < T::zero() || *x > T::one()) {
            return Err(Error::Domain("fractions must lie in [0, 1]".into()));
        }
        let max = v.iter().copied().fold(T::zero(), T::max);
        if (max - T::one()).abs() > T::of(SUM_TOL_ARITH) {
            return Err(Error::Domain("at least one fraction must equal 1".into()));
        }
        Ok(Self { v })
    }

    pub fn values(&self) -> &[T] {
        &self.v
    }

    pub fn num_groups(&self) -> usize {
        self.v.len()
    }

    pub fn for_group(&self, group: usize) -> T {
        self.v[group - 1]
    }
}

/// Per-observation weights `w_i = p(g_i) / p_train(g_i)` induced by group
/// weights under a shift. Errors when a group present in `groups` has zero
/// training probability.
pub fn per_observation_weights<T: Scalar>(
    p: &SimplexWeights<T>,
    shift: &ShiftSpec<T>,
    groups: &[usize],
) -> Result<Vec<T>> {
    per_observation_weights_raw(p.values(), shift.p_train(), groups)
}

/// Same as [`per_observation_weights`] but over raw slices, used where the
/// numerator is not simplex-constrained (loss weights, empirical marginals).
pub fn per_observation_weights_raw<T: Scalar>(
    numerators: &[T],
    denominators: &[T],
    groups: &[usize],
) -> Result<Vec<T>> {
    let mut w = Vec::with_capacity(groups.len());
    for &g in groups {
        let idx = g - 1;
        if idx >= numerators.len() || idx >= denominators.len() {
            return Err(Error::Domain(format!("group label {g} outside weight vectors")));
        }
        if denominators[idx] == T::zero() {
            return Err(Error::SupportViolation { group: g });
        }
        w.push(numerators[idx] / denominators[idx]);
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_distributions_give_unit_ratios() {
        let shift = ShiftSpec::new(vec![0.5, 0.5], vec![0.5, 0.5]).unwrap();
        let r = likelihood_ratios(&shift).unwrap();
        assert_eq!(r.values(), &[1.0, 1.0]);
    }

    #[test]
    fn ratios_by_hand_division() {
        let shift: ShiftSpec<f64> = ShiftSpec::new(vec![0.9, 0.1], vec![0.5, 0.5]).unwrap();
        let r = likelihood_ratios(&shift).unwrap();
        assert!((r.values()[0] - 0.5 / 0.9).abs() < 1e-15);
        assert!((r.values()[1] - 5.0).abs() < 1e-15);
    }

    #[test]
    fn missing_support_is_an_error() {
        let shift = ShiftSpec::new(vec![1.0, 0.0], vec![0.9, 0.1]).unwrap();
        let err = likelihood_ratios(&shift).unwrap_err();
        assert!(matches!(err, Error::SupportViolation { group: 2 }));
    }

    #[test]
    fn zero_over_zero_is_zero() {
        let shift = ShiftSpec::new(vec![1.0, 0.0], vec![1.0, 0.0]).unwrap();
        let r = likelihood_ratios(&shift).unwrap();
        assert_eq!(r.values()[1], 0.0);
    }

    #[test]
    fn ratios_integrate_to_one_under_training_marginals() {
        let shift = ShiftSpec::new(vec![0.7, 0.2, 0.1], vec![0.2, 0.3, 0.5]).unwrap();
        let r = likelihood_ratios(&shift).unwrap();
        let total: f64 = shift
            .p_train()
            .iter()
            .zip(r.values())
            .map(|(&p, &r)| p * r)
            .sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_simplex(&[2.0, 2.0]).unwrap().values(), &[0.5, 0.5]);
        assert_eq!(normalize_simplex(&[1.0, 3.0]).unwrap().values(), &[0.25, 0.75]);
        assert!(matches!(
            normalize_simplex(&[0.0, 0.0]).unwrap_err(),
            Error::DegenerateWeights(_)
        ));
        assert!(normalize_simplex(&[-1.0, 2.0]).is_err());
        assert!(normalize_simplex(&[f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn observation_weights_cancel_at_training_marginals() {
        let shift = ShiftSpec::new(vec![0.5, 0.5], vec![0.5, 0.5]).unwrap();
        let p = SimplexWeights::new(vec![0.5, 0.5]).unwrap();
        let w = per_observation_weights(&p, &shift, &[1, 2, 1]).unwrap();
        assert_eq!(w, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn observation_weights_elementwise() {
        let shift: ShiftSpec<f64> = ShiftSpec::new(vec![0.9, 0.1], vec![0.5, 0.5]).unwrap();
        let p = SimplexWeights::new(vec![0.5, 0.5]).unwrap();
        let w = per_observation_weights(&p, &shift, &[1, 2]).unwrap();
        assert!((w[0] - 0.5 / 0.9).abs() < 1e-15);
        assert!((w[1] - 5.0).abs() < 1e-15);
    }

    #[test]
    fn zero_group_weight_gives_zero_observation_weight() {
        let shift = ShiftSpec::new(vec![0.5, 0.5], vec![0.5, 0.5]).unwrap();
        let p = SimplexWeights::new(vec![1.0, 0.0]).unwrap();
        let w = per_observation_weights(&p, &shift, &[2]).unwrap();
        assert_eq!(w, vec![0.0]);
    }

    #[test]
    fn present_group_without_training_mass_errors() {
        let shift = ShiftSpec::new(vec![1.0, 0.0], vec![1.0, 0.0]).unwrap();
        let p = SimplexWeights::new(vec![0.5, 0.5]).unwrap();
        let err = per_observation_weights(&p, &shift, &[1, 2]).unwrap_err();
        assert!(matches!(err, Error::SupportViolation { group: 2 }));
    }

    #[test]
    fn fractions_require_a_pinned_group() {
        assert!(SubsampleFractions::new(vec![0.5, 1.0]).is_ok());
        assert!(SubsampleFractions::new(vec![0.5, 0.9]).is_err());
        assert!(SubsampleFractions::new(vec![0.5, 1.5]).is_err());
    }
}
