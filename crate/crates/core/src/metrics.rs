//! Generalization metrics and statistical comparison: per-group accuracy
//! aggregation, the paired one-sided t-test, and a Monte Carlo checker for
//! the importance-weighting identity
//! `E_train[r(g) loss] = E_test[loss]`.

use crate::data::ParameterVector;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed::{derive_seed, rng_from_seed};
use crate::weights::{likelihood_ratios, ShiftSpec, SimplexWeights};
use ndarray::Array1;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

/// The two headline metrics plus the per-group accuracies they summarize.
/// Undefined entries correspond to groups with no test observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricPair<T> {
    pub weighted_average_accuracy: T,
    pub worst_group_accuracy: T,
    pub per_group: Vec<Option<T>>,
}

/// Weight-averaged per-group accuracy. `group_weights` defaults to uniform;
/// undefined (empty-group) entries are excluded and the weights of the
/// remaining groups renormalized.
pub fn weighted_average_accuracy<T: Scalar>(
    per_group: &[Option<T>],
    group_weights: Option<&SimplexWeights<T>>,
) -> Result<T> {
    if let Some(w) = group_weights {
        if w.num_groups() != per_group.len() {
            return Err(Error::Size("weight vector does not match group count".into()));
        }
    }
    let uniform = T::one() / T::from_count(per_group.len().max(1));
    let mut total = T::zero();
    let mut mass = T::zero();
    for (g, acc) in per_group.iter().enumerate() {
        if let Some(a) = acc {
            if *a < T::zero() || *a > T::one() {
                return Err(Error::Domain("accuracy outside [0, 1]".into()));
            }
            let w = group_weights.map_or(uniform, |gw| gw.values()[g]);
            total += w * *a;
            mass += w;
        }
    }
    if mass == T::zero() {
        return Err(Error::AllGroupsEmpty);
    }
    Ok(total / mass)
}

/// Minimum accuracy over the defined groups.
pub fn worst_group_accuracy<T: Scalar>(per_group: &[Option<T>]) -> Result<T> {
    per_group
        .iter()
        .flatten()
        .copied()
        .fold(None, |acc: Option<T>, a| Some(acc.map_or(a, |m| m.min(a))))
        .ok_or(Error::AllGroupsEmpty)
}

/// Bundle both metrics from per-group accuracies (uniform group weights).
pub fn metric_pair<T: Scalar>(per_group: &[Option<T>]) -> Result<MetricPair<T>> {
    Ok(MetricPair {
        weighted_average_accuracy: weighted_average_accuracy(per_group, None)?,
        worst_group_accuracy: worst_group_accuracy(per_group)?,
        per_group: per_group.to_vec(),
    })
}

/// Result of a paired one-sided t-test with alternative
/// `treatment > baseline`. When every difference is identical the t
/// statistic is undefined: the p-value is 0 for a positive mean, 1 for a
/// negative mean, and `None` (a no-op comparison) for a zero mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedTestResult<T> {
    pub mean_difference: T,
    pub standard_error: T,
    pub t_statistic: Option<T>,
    pub p_value: Option<T>,
    pub n_pairs: usize,
}

impl<T: Scalar> PairedTestResult<T> {
    /// True when the comparison is degenerate (all differences zero).
    pub fn is_noop(&self) -> bool {
        self.p_value.is_none()
    }

    /// Table marker: `**` at the 5% level, `*` at 10%, empty otherwise.
    pub fn significance_marker(&self) -> &'static str {
        match self.p_value.map(|p| p.to_f64_lossy()) {
            Some(p) if p < 0.05 => "**",
            Some(p) if p < 0.10 => "*",
            _ => "",
        }
    }

    /// Two-sided confidence interval for the mean difference at the given
    /// level (e.g. 0.9). Degenerates to a point when the variance is zero.
    pub fn confidence_interval(&self, level: f64) -> (T, T) {
        if self.standard_error == T::zero() {
            return (self.mean_difference, self.mean_difference);
        }
        let df = (self.n_pairs - 1) as f64;
        let t = StudentsT::new(0.0, 1.0, df)
            .expect("valid t distribution")
            .inverse_cdf(0.5 + level / 2.0);
        let margin = T::of(t) * self.standard_error;
        (self.mean_difference - margin, self.mean_difference + margin)
    }
}

/// Paired one-sided t-test of `treatment > baseline`. The t tail is the
/// regularized-incomplete-beta Student-t survival function.
pub fn paired_one_sided_t_test<T: Scalar>(
    baseline: &[T],
    treatment: &[T],
) -> Result<PairedTestResult<T>> {
    let k = baseline.len();
    if k < 2 || treatment.len() != k {
        return Err(Error::Size(format!(
            "need two equal-length arms with k >= 2; got {} and {}",
            k,
            treatment.len()
        )));
    }
    let diffs: Vec<T> = treatment.iter().zip(baseline).map(|(&t, &b)| t - b).collect();
    let kf = T::from_count(k);
    let mean = diffs.iter().copied().sum::<T>() / kf;
    let var = diffs.iter().map(|&d| (d - mean) * (d - mean)).sum::<T>() / (kf - T::one());
    let se = (var / kf).sqrt();
    if se == T::zero() {
        let p_value = if mean > T::zero() {
            Some(T::zero())
        } else if mean < T::zero() {
            Some(T::one())
        } else {
            None
        };
        return Ok(PairedTestResult {
            mean_difference: mean,
            standard_error: se,
            t_statistic: None,
            p_value,
            n_pairs: k,
        });
    }
    let t = mean / se;
    let dist = StudentsT::new(0.0, 1.0, (k - 1) as f64)
        .map_err(|e| Error::Domain(format!("t distribution: {e}")))?;
    let p = dist.sf(t.to_f64_lossy());
    Ok(PairedTestResult {
        mean_difference: mean,
        standard_error: se,
        t_statistic: Some(t),
        p_value: Some(T::of(p)),
        n_pairs: k,
    })
}

/// Monte Carlo estimates of the two sides of the importance-weighting
/// identity, with their sampling errors.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityCheck<T> {
    pub weighted_train_estimate: T,
    pub weighted_train_se: T,
    pub test_estimate: T,
    pub test_se: T,
    /// `sqrt(train_se^2 + test_se^2)`.
    pub pooled_se: T,
    /// `weighted_train_estimate - test_estimate`.
    pub difference: T,
}

fn draw_group<T: Scalar>(marginals: &[T], rng: &mut ChaCha8Rng) -> usize {
    let u = T::of(rng.random::<f64>());
    let mut acc = T::zero();
    for (k, &p) in marginals.iter().enumerate() {
        acc += p;
        if u < acc {
            return k + 1;
        }
    }
    marginals.len()
}

fn mean_and_se<T: Scalar>(sum: T, sum_sq: T, n: usize) -> (T, T) {
    let nf = T::from_count(n);
    let mean = sum / nf;
    let var = ((sum_sq / nf - mean * mean) * nf / (nf - T::one())).max(T::zero());
    (mean, (var / nf).sqrt())
}

/// Verify `E_train[r(g) loss] = E_test[loss]` by Monte Carlo: draws
/// `sample_size` observations from each side using the conditional sampler
/// `(group, rng) -> (y, x)` and the loss `(theta, y, x) -> value`. The two
/// estimates agree within sampling error exactly when the ratios match the
/// true shift.
pub fn importance_identity_check<T, S, L>(
    theta: &ParameterVector<T>,
    shift: &ShiftSpec<T>,
    sampler: S,
    loss: L,
    sample_size: usize,
    seed: u64,
) -> Result<IdentityCheck<T>>
where
    T: Scalar,
    S: FnMut(usize, &mut ChaCha8Rng) -> (T, Array1<T>),
    L: Fn(&ParameterVector<T>, T, &Array1<T>) -> T,
{
    let ratios = likelihood_ratios(shift)?;
    importance_identity_check_with_ratios(
        theta,
        shift,
        ratios.values(),
        sampler,
        loss,
        sample_size,
        seed,
    )
}

/// [`importance_identity_check`] with explicit per-group ratios instead of
/// the ones implied by the shift. Deliberately mismatched ratios (for
/// example, ratios permuted across groups) break the identity and serve as
/// a negative control.
pub fn importance_identity_check_with_ratios<T, S, L>(
    theta: &ParameterVector<T>,
    shift: &ShiftSpec<T>,
    ratios: &[T],
    mut sampler: S,
    loss: L,
    sample_size: usize,
    seed: u64,
) -> Result<IdentityCheck<T>>
where
    T: Scalar,
    S: FnMut(usize, &mut ChaCha8Rng) -> (T, Array1<T>),
    L: Fn(&ParameterVector<T>, T, &Array1<T>) -> T,
{
    if sample_size < 1000 {
        return Err(Error::Size("need at least 1000 samples per side".into()));
    }
    if ratios.len() != shift.num_groups() {
        return Err(Error::Size("ratio vector does not match group count".into()));
    }

    let mut rng = rng_from_seed(derive_seed(seed, 0));
    let mut sum = T::zero();
    let mut sum_sq = T::zero();
    for _ in 0..sample_size {
        let g = draw_group(shift.p_train(), &mut rng);
        let (y, x) = sampler(g, &mut rng);
        let v = ratios[g - 1] * loss(theta, y, &x);
        sum += v;
        sum_sq += v * v;
    }
    let (train_mean, train_se) = mean_and_se(sum, sum_sq, sample_size);

    let mut rng = rng_from_seed(derive_seed(seed, 1));
    let mut sum = T::zero();
    let mut sum_sq = T::zero();
    for _ in 0..sample_size {
        let g = draw_group(shift.p_test(), &mut rng);
        let (y, x) = sampler(g, &mut rng);
        let v = loss(theta, y, &x);
        sum += v;
        sum_sq += v * v;
    }
    let (test_mean, test_se) = mean_and_se(sum, sum_sq, sample_size);

    Ok(IdentityCheck {
        weighted_train_estimate: train_mean,
        weighted_train_se: train_se,
        test_estimate: test_mean,
        test_se,
        pooled_se: (train_se * train_se + test_se * test_se).sqrt(),
        difference: train_mean - test_mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from_seed;
    use crate::theory::LinRegDGP;
    use rand_distr::StandardNormal;

    #[test]
    fn average_accuracy_cases() {
        let all: Vec<Option<f64>> = vec![Some(1.0); 4];
        assert_eq!(weighted_average_accuracy(&all, None).unwrap(), 1.0);
        let two: Vec<Option<f64>> = vec![Some(0.9), Some(0.5)];
        assert!((weighted_average_accuracy(&two, None).unwrap() - 0.7).abs() < 1e-15);
        let holey: Vec<Option<f64>> = vec![Some(0.8), None, Some(0.6)];
        assert!((weighted_average_accuracy(&holey, None).unwrap() - 0.7).abs() < 1e-15);
        let empty: Vec<Option<f64>> = vec![None, None];
        assert!(matches!(
            weighted_average_accuracy(&empty, None).unwrap_err(),
            Error::AllGroupsEmpty
        ));
    }

    #[test]
    fn nonuniform_average_uses_given_weights() {
        let per: Vec<Option<f64>> = vec![Some(1.0), Some(0.0)];
        let w = SimplexWeights::new(vec![0.8, 0.2]).unwrap();
        assert!((weighted_average_accuracy(&per, Some(&w)).unwrap() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn worst_group_cases() {
        assert_eq!(
            worst_group_accuracy(&[Some(0.9), Some(0.5), Some(0.7)]).unwrap(),
            0.5
        );
        assert_eq!(worst_group_accuracy(&[Some(0.6), Some(0.6)]).unwrap(), 0.6);
        // permutation invariance
        assert_eq!(
            worst_group_accuracy(&[Some(0.5), Some(0.9), Some(0.7)]).unwrap(),
            worst_group_accuracy(&[Some(0.7), Some(0.5), Some(0.9)]).unwrap()
        );
        let empty: Vec<Option<f64>> = vec![];
        assert!(worst_group_accuracy(&empty).is_err());
    }

    #[test]
    fn worst_never_exceeds_weighted_average() {
        let mut rng = rng_from_seed(3);
        for _ in 0..200 {
            let per: Vec<Option<f64>> = (0..5)
                .map(|_| (rng.random::<f64>() < 0.8).then(|| rng.random::<f64>()))
                .collect();
            if per.iter().all(Option::is_none) {
                continue;
            }
            let worst = worst_group_accuracy(&per).unwrap();
            let avg = weighted_average_accuracy(&per, None).unwrap();
            assert!(worst <= avg + 1e-15);
        }
    }

    #[test]
    fn t_test_hand_value() {
        // differences (1, 2, 3, 4, 5): t = 3 / sqrt(0.5), p from reference
        let base = vec![0.0f64; 5];
        let treat = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        let r = paired_one_sided_t_test(&base, &treat).unwrap();
        assert!((r.t_statistic.unwrap() - 4.242640687119285).abs() < 1e-12);
        assert!((r.p_value.unwrap() - 0.0066177997818413475).abs() < 1e-10);
        assert_eq!(r.n_pairs, 5);
        assert_eq!(r.significance_marker(), "**");
    }

    #[test]
    fn t_test_degenerate_paths() {
        let base = vec![0.0f64; 5];
        let up = vec![1.0; 5];
        let r = paired_one_sided_t_test(&base, &up).unwrap();
        assert_eq!(r.p_value, Some(0.0));
        assert!(r.t_statistic.is_none());
        let down = vec![-1.0; 5];
        let r = paired_one_sided_t_test(&base, &down).unwrap();
        assert_eq!(r.p_value, Some(1.0));
        let r = paired_one_sided_t_test(&base, &base).unwrap();
        assert!(r.is_noop());
    }

    #[test]
    fn t_test_shift_invariance_and_arm_swap() {
        let mut rng = rng_from_seed(8);
        for _ in 0..50 {
            let base: Vec<f64> = (0..6).map(|_| rng.random::<f64>()).collect();
            let treat: Vec<f64> = (0..6).map(|_| rng.random::<f64>()).collect();
            let r1 = paired_one_sided_t_test(&base, &treat).unwrap();
            let c = 17.3;
            let base_c: Vec<f64> = base.iter().map(|v| v + c).collect();
            let treat_c: Vec<f64> = treat.iter().map(|v| v + c).collect();
            let r2 = paired_one_sided_t_test(&base_c, &treat_c).unwrap();
            assert!((r1.p_value.unwrap() - r2.p_value.unwrap()).abs() < 1e-9);
            // swapping the arms reflects the one-sided p-value
            let r3 = paired_one_sided_t_test(&treat, &base).unwrap();
            assert!((r1.p_value.unwrap() + r3.p_value.unwrap() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn confidence_interval_brackets_the_mean() {
        let base = vec![0.0f64; 5];
        let treat = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        let r = paired_one_sided_t_test(&base, &treat).unwrap();
        let (lo, hi) = r.confidence_interval(0.9);
        assert!(lo < 3.0 && 3.0 < hi);
        // t(0.95, 4 df) = 2.1318; margin = t * se
        let margin = 2.131846786 * r.standard_error;
        assert!((hi - 3.0 - margin).abs() < 1e-6);
    }

    fn dgp_sampler(
        dgp: &LinRegDGP<f64>,
    ) -> impl FnMut(usize, &mut ChaCha8Rng) -> (f64, Array1<f64>) + '_ {
        move |group, rng| {
            let d = dgp.dim();
            let mut x = Array1::<f64>::zeros(d + 1);
            x[0] = 1.0;
            let a = if group == 1 { dgp.a1() } else { dgp.a0() };
            let mut mean = a;
            for j in 0..d {
                let v: f64 = rng.sample(StandardNormal);
                x[j + 1] = v;
                mean += dgp.beta()[j] * v;
            }
            let y = mean + rng.sample::<f64, _>(StandardNormal) * dgp.sigma2().sqrt();
            (y, x)
        }
    }

    fn squared_loss(theta: &ParameterVector<f64>, y: f64, x: &Array1<f64>) -> f64 {
        let e = y - x.dot(theta.coefficients());
        e * e
    }

    #[test]
    fn identity_holds_without_shift() {
        let dgp: LinRegDGP<f64> = LinRegDGP::with_zero_slopes(1.0, 0.0, 1.0, 3, 0.5).unwrap();
        let shift: ShiftSpec<f64> = ShiftSpec::two_group(0.5, 0.5).unwrap();
        let theta = ParameterVector::new(ndarray::array![0.4, 0.1, -0.2, 0.05]).unwrap();
        let check = importance_identity_check(
            &theta,
            &shift,
            dgp_sampler(&dgp),
            squared_loss,
            20_000,
            5,
        )
        .unwrap();
        assert!(check.difference.abs() <= 3.0 * check.pooled_se);
    }

    #[test]
    fn identity_holds_under_shift_and_fails_with_swapped_ratios() {
        let dgp: LinRegDGP<f64> = LinRegDGP::with_zero_slopes(1.0, 0.0, 1.0, 2, 0.9).unwrap();
        let theta = ParameterVector::new(ndarray::array![0.2, 0.0, 0.0]).unwrap();
        let shift: ShiftSpec<f64> = ShiftSpec::two_group(0.9, 0.5).unwrap();
        let check = importance_identity_check(
            &theta,
            &shift,
            dgp_sampler(&dgp),
            squared_loss,
            100_000,
            6,
        )
        .unwrap();
        assert!(
            check.difference.abs() <= 3.0 * check.pooled_se,
            "diff {} pooled {}",
            check.difference,
            check.pooled_se
        );

        // negative control: the two groups' ratios swapped, so the small
        // minority ratio lands on the majority group and vice versa
        let true_ratios = likelihood_ratios(&shift).unwrap();
        let swapped = vec![true_ratios.values()[1], true_ratios.values()[0]];
        let bad = importance_identity_check_with_ratios(
            &theta,
            &shift,
            &swapped,
            dgp_sampler(&dgp),
            squared_loss,
            100_000,
            6,
        )
        .unwrap();
        assert!(
            bad.difference.abs() > 5.0 * bad.pooled_se,
            "swapped ratios should break the identity: diff {} pooled {}",
            bad.difference,
            bad.pooled_se
        );
    }

    #[test]
    fn pooled_se_scales_as_inverse_root_of_sample_size() {
        let dgp: LinRegDGP<f64> = LinRegDGP::with_zero_slopes(1.0, 0.0, 1.0, 2, 0.7).unwrap();
        let shift: ShiftSpec<f64> = ShiftSpec::two_group(0.7, 0.4).unwrap();
        let theta = ParameterVector::new(ndarray::array![0.1, 0.2, -0.1]).unwrap();
        let small = importance_identity_check(
            &theta,
            &shift,
            dgp_sampler(&dgp),
            squared_loss,
            25_000,
            9,
        )
        .unwrap();
        let large = importance_identity_check(
            &theta,
            &shift,
            dgp_sampler(&dgp),
            squared_loss,
            100_000,
            9,
        )
        .unwrap();
        let ratio = small.pooled_se / large.pooled_se;
        assert!(
            (ratio - 2.0).abs() / 2.0 < 0.2,
            "quadrupling samples should halve the SE; ratio {ratio}"
        );
    }

    #[test]
    fn identity_check_enforces_minimum_sample_size() {
        let dgp: LinRegDGP<f64> = LinRegDGP::with_zero_slopes(1.0, 0.0, 1.0, 2, 0.7).unwrap();
        let shift: ShiftSpec<f64> = ShiftSpec::two_group(0.7, 0.4).unwrap();
        let theta = ParameterVector::new(ndarray::array![0.1, 0.2, -0.1]).unwrap();
        assert!(matches!(
            importance_identity_check(&theta, &shift, dgp_sampler(&dgp), squared_loss, 10, 1)
                .unwrap_err(),
            Error::Size(_)
        ));
    }
}
