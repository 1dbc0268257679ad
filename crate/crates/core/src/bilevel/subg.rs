//! Subsample-fraction optimization: the relaxed subsampling estimator
//! (SUBG) and its coefficient-averaged ensemble variant (DFR).

use super::{
    argmin_step, group_weighted_val_loss, split_with_coverage, BilevelConfig, BilevelRun,
    InnerDiagnostics, TraceRecord,
};
use crate::data::{GroupedDataset, ParameterVector, Split};
use crate::error::{Error, Result};
use crate::estimators::subg_relaxed_fit_warm;
use crate::hypergrad::{hypergradient_fractions, hypergradient_fractions_unverified};
use crate::scalar::Scalar;
use crate::seed::derive_seed2;
use crate::weights::{likelihood_ratios, LikelihoodRatios, ShiftSpec, SubsampleFractions};
use ndarray::Array1;

/// Group with the fewest training observations (smallest index on ties);
/// its fraction is pinned at one so optimization cannot discard the group
/// that is already scarcest.
fn smallest_group<T: Scalar>(train: &GroupedDataset<T>) -> usize {
    let mut best = 1usize;
    for g in 2..=train.num_groups() {
        if train.group_count(g) < train.group_count(best) {
            best = g;
        }
    }
    best
}

/// Group-balancing initialization: `v_g = min_count / n_g`, which makes
/// every group contribute the same expected number of subsampled rows (the
/// standard subsampling heuristic).
fn balancing_fractions<T: Scalar>(
    train: &GroupedDataset<T>,
    pinned: usize,
    floor: T,
) -> Result<SubsampleFractions<T>> {
    let min_count = (1..=train.num_groups())
        .map(|g| train.group_count(g))
        .min()
        .unwrap_or(0);
    let v: Vec<T> = (1..=train.num_groups())
        .map(|g| {
            if g == pinned {
                T::one()
            } else {
                (T::from_count(min_count) / T::from_count(train.group_count(g))).max(floor)
            }
        })
        .collect();
    SubsampleFractions::new(v)
}

/// Inner estimator of one fraction-loop step: parameters, diagnostics, and
/// (unless the loop is at its last step) the hypergradient of the
/// validation objective with respect to the fractions.
trait FractionInner<T: Scalar> {
    fn step(
        &mut self,
        v: &SubsampleFractions<T>,
        step: usize,
        want_gradient: bool,
    ) -> Result<(ParameterVector<T>, InnerDiagnostics<T>, Option<(Array1<T>, T)>)>;
}

/// Relaxed v-weighted fit on the full training half (SUBG).
struct RelaxedInner<'a, T: Scalar> {
    train: &'a GroupedDataset<T>,
    val: &'a GroupedDataset<T>,
    ratios: &'a LikelihoodRatios<T>,
    config: &'a BilevelConfig<T>,
    warm: ParameterVector<T>,
}

impl<T: Scalar> FractionInner<T> for RelaxedInner<'_, T> {
    fn step(
        &mut self,
        v: &SubsampleFractions<T>,
        _step: usize,
        want_gradient: bool,
    ) -> Result<(ParameterVector<T>, InnerDiagnostics<T>, Option<(Array1<T>, T)>)> {
        let fit = subg_relaxed_fit_warm(
            self.train,
            v,
            &self.config.penalty,
            &self.config.solver,
            self.warm.clone(),
        )?;
        self.warm = fit.theta.clone();
        let grad = if want_gradient {
            let report = hypergradient_fractions(
                &fit.theta,
                self.train,
                self.val,
                v,
                self.ratios.values(),
                &self.config.penalty,
                self.config.damping,
                self.config.solver.gradient_tolerance,
            )?;
            Some((report.gradient, report.hessian_condition_estimate))
        } else {
            None
        };
        Ok((fit.theta.clone(), InnerDiagnostics::from_fit(&fit), grad))
    }
}

/// Ensemble of subsample fits averaged in coefficient space (DFR). Each
/// member is fitted on its own drawn subsample; per-model hypergradients
/// use the relaxed-objective curvature at the member's parameters (the
/// member is stationary for its own subsample loss, not the relaxed loss,
/// so the per-model stationarity check is against the subsample fit) and
/// are averaged.
struct EnsembleInner<'a, T: Scalar> {
    train: &'a GroupedDataset<T>,
    val: &'a GroupedDataset<T>,
    ratios: &'a LikelihoodRatios<T>,
    config: &'a BilevelConfig<T>,
    ensemble_size: usize,
}

/// Seed of ensemble member `member` at outer step `step`, derived from the
/// run seed. Exposed so a baseline arm can reproduce the step-0 ensemble.
pub fn dfr_step_seed(seed: u64, step: usize, member: usize) -> u64 {
    derive_seed2(seed, 0xdf0 + step as u64, member as u64)
}

impl<T: Scalar> FractionInner<T> for EnsembleInner<'_, T> {
    fn step(
        &mut self,
        v: &SubsampleFractions<T>,
        step: usize,
        want_gradient: bool,
    ) -> Result<(ParameterVector<T>, InnerDiagnostics<T>, Option<(Array1<T>, T)>)> {
        let dim = self.train.dim();
        let mut mean_theta = Array1::<T>::zeros(dim);
        let mut mean_grad = Array1::<T>::zeros(v.num_groups());
        let mut max_condition = T::zero();
        let mut iterations = 0usize;
        let mut converged = true;
        let mut members = Vec::with_capacity(self.ensemble_size);
        for member in 0..self.ensemble_size {
            let rows = crate::estimators::draw_subsample(
                self.train,
                v,
                dfr_step_seed(self.config.seed, step, member),
            )?;
            let subset = self.train.subset(&rows)?;
            let ones = vec![T::one(); subset.len()];
            let fit = crate::estimators::logistic_fit(
                &subset,
                &ones,
                &self.config.penalty,
                &self.config.solver,
            )?;
            iterations += fit.iterations;
            converged &= fit.converged;
            mean_theta += fit.theta.coefficients();
            members.push(fit);
        }
        let k = T::from_count(self.ensemble_size);
        mean_theta.mapv_inplace(|c| c / k);
        if want_gradient {
            for fit in &members {
                let report = hypergradient_fractions_unverified(
                    &fit.theta,
                    self.train,
                    self.val,
                    v,
                    self.ratios.values(),
                    &self.config.penalty,
                    self.config.damping,
                )?;
                mean_grad += &report.gradient;
                max_condition = max_condition.max(report.hessian_condition_estimate);
            }
            mean_grad.mapv_inplace(|g| g / k);
        }
        let theta = ParameterVector::new(mean_theta)?;
        let loss = group_weighted_val_loss(&theta, self.val, self.ratios.values())?;
        let diag = InnerDiagnostics {
            iterations: iterations / self.ensemble_size,
            converged,
            gradient_norm: T::nan(),
            final_loss: loss,
        };
        Ok((theta, diag, want_gradient.then_some((mean_grad, max_condition))))
    }
}

/// The shared fraction loop: multiplicative updates in each coordinate
/// (fractions are not normalized), clamped to `[floor, 1]`, with the pinned
/// group's coordinate masked from updates and held at one.
#[allow(clippy::too_many_arguments)]
fn run_fraction_loop<T: Scalar>(
    inner: &mut dyn FractionInner<T>,
    val: &GroupedDataset<T>,
    ratios: &LikelihoodRatios<T>,
    config: &BilevelConfig<T>,
    mut v: SubsampleFractions<T>,
    pinned: usize,
    floor: T,
    split: &Split<T>,
) -> Result<BilevelRun<T>> {
    let num_groups = v.num_groups();
    let mut u = vec![T::zero(); num_groups];
    let mut pending_zeta: Option<Vec<T>> = None;
    let mut pending_u: Option<Vec<T>> = None;
    let mut pending_condition: Option<T> = None;
    let mut trace = Vec::with_capacity(config.max_steps + 1);
    let mut best: Option<(usize, T, Vec<T>, ParameterVector<T>)> = None;

    for step in 0..=config.max_steps {
        let want_gradient = step < config.max_steps;
        let (theta, diag, grad) = inner.step(&v, step, want_gradient)?;
        let objective = group_weighted_val_loss(&theta, val, ratios.values())?;
        trace.push(TraceRecord {
            step,
            weights: v.values().to_vec(),
            loss_weights: None,
            objective,
            hypergradient: pending_zeta.take(),
            momentum: pending_u.take(),
            inner_iterations: diag.iterations,
            inner_converged: diag.converged,
            damping_used: config.damping,
            hessian_condition: pending_condition.take(),
            inner: Some(diag),
        });
        if best.as_ref().map_or(true, |(_, obj, _, _)| objective < *obj) {
            best = Some((step, objective, v.values().to_vec(), theta));
        }
        let Some((gradient, condition)) = grad else { break };

        let mut zeta: Vec<T> = gradient.iter().map(|&g| -g).collect();
        zeta[pinned - 1] = T::zero();
        let mut v_new = Vec::with_capacity(num_groups);
        for g in 0..num_groups {
            u[g] = config.momentum * u[g] + (T::one() - config.momentum) * zeta[g];
            let updated = v.values()[g] * (config.learning_rate * u[g]).exp();
            let clamped = updated.max(floor).min(T::one());
            v_new.push(if g + 1 == pinned { T::one() } else { clamped });
        }
        v = SubsampleFractions::new(v_new)?;
        pending_zeta = Some(zeta);
        pending_u = Some(u.clone());
        pending_condition = Some(condition);
    }

    let (selected_step, selected_objective, selected_weights, selected_theta) =
        best.expect("trace is non-empty");
    debug_assert_eq!(selected_step, argmin_step(&trace));
    Ok(BilevelRun {
        selected_weights,
        selected_theta,
        selected_step,
        selected_objective,
        trace,
        train_rows: split.train_rows.clone(),
        val_rows: split.val_rows.clone(),
    })
}

fn fraction_floor<T: Scalar>(train: &GroupedDataset<T>, allow_zero: bool) -> T {
    if allow_zero {
        T::zero()
    } else {
        let max_count = (1..=train.num_groups())
            .map(|g| train.group_count(g))
            .max()
            .unwrap_or(1);
        T::one() / T::from_count(max_count)
    }
}

/// Optimize subsample fractions for the relaxed subsampling estimator.
///
/// Starts from group-balancing fractions with the scarcest group pinned at
/// one (`pinned_group` overrides the default), updates multiplicatively
/// without normalization, and clamps each fraction to
/// `[1/max_g n_g, 1]` so no group is silently emptied (the floor drops to
/// zero behind `allow_zero_fractions`).
pub fn optimize_subg<T: Scalar>(
    data: &GroupedDataset<T>,
    shift: &ShiftSpec<T>,
    n_train: usize,
    config: &BilevelConfig<T>,
    pinned_group: Option<usize>,
) -> Result<BilevelRun<T>> {
    config.validate()?;
    let ratios = likelihood_ratios(shift)?;
    let split = split_with_coverage(data, n_train, config.seed, config.stratified_split)?;
    let pinned = pinned_group.unwrap_or_else(|| smallest_group(&split.train));
    if pinned == 0 || pinned > split.train.num_groups() {
        return Err(Error::Domain(format!("pinned group {pinned} out of range")));
    }
    let floor = fraction_floor(&split.train, config.allow_zero_fractions);
    let v0 = balancing_fractions(&split.train, pinned, floor)?;
    let mut inner = RelaxedInner {
        train: &split.train,
        val: &split.val,
        ratios: &ratios,
        config,
        warm: ParameterVector::zeros(split.train.dim()),
    };
    run_fraction_loop(&mut inner, &split.val, &ratios, config, v0, pinned, floor, &split)
}

/// Optimize subsample fractions for the coefficient-averaged ensemble.
///
/// The data is split in half: the ensemble is fitted on one half (the
/// method's usual fitting split) and the other half drives the outer
/// objective. A single-member ensemble is evaluated in expectation (the
/// relaxed objective), so `ensemble_size = 1` reproduces [`optimize_subg`]
/// on the same split exactly; larger ensembles fit each member on its own
/// drawn subsample and average both the coefficients and the per-model
/// hypergradients.
pub fn optimize_dfr<T: Scalar>(
    data: &GroupedDataset<T>,
    shift: &ShiftSpec<T>,
    config: &BilevelConfig<T>,
    ensemble_size: usize,
) -> Result<BilevelRun<T>> {
    config.validate()?;
    if ensemble_size == 0 {
        return Err(Error::Size("ensemble_size must be at least 1".into()));
    }
    let n_fit = data.len() / 2;
    if n_fit == 0 || n_fit >= data.len() {
        return Err(Error::Size("dataset too small to split in half".into()));
    }
    let ratios = likelihood_ratios(shift)?;
    let split = split_with_coverage(data, n_fit, config.seed, config.stratified_split)?;
    let pinned = smallest_group(&split.train);
    let floor = fraction_floor(&split.train, config.allow_zero_fractions);
    let v0 = balancing_fractions(&split.train, pinned, floor)?;
    if ensemble_size == 1 {
        let mut inner = RelaxedInner {
            train: &split.train,
            val: &split.val,
            ratios: &ratios,
            config,
            warm: ParameterVector::zeros(split.train.dim()),
        };
        return run_fraction_loop(
            &mut inner, &split.val, &ratios, config, v0, pinned, floor, &split,
        );
    }
    let mut inner = EnsembleInner {
        train: &split.train,
        val: &split.val,
        ratios: &ratios,
        config,
        ensemble_size,
    };
    run_fraction_loop(&mut inner, &split.val, &ratios, config, v0, pinned, floor, &split)
}

/// Ensemble estimate at fixed fractions on a prepared dataset, reproducing
/// the step-0 ensemble of [`optimize_dfr`] (used by baseline arms).
pub(crate) fn dfr_baseline_theta<T: Scalar>(
    train: &GroupedDataset<T>,
    v: &SubsampleFractions<T>,
    config: &BilevelConfig<T>,
    ensemble_size: usize,
) -> Result<ParameterVector<T>> {
    if ensemble_size == 1 {
        let fit = subg_relaxed_fit_warm(
            train,
            v,
            &config.penalty,
            &config.solver,
            ParameterVector::zeros(train.dim()),
        )?;
        return Ok(fit.theta);
    }
    let dim = train.dim();
    let mut mean = Array1::<T>::zeros(dim);
    for member in 0..ensemble_size {
        let rows =
            crate::estimators::draw_subsample(train, v, dfr_step_seed(config.seed, 0, member))?;
        let subset = train.subset(&rows)?;
        let ones = vec![T::one(); subset.len()];
        let fit =
            crate::estimators::logistic_fit(&subset, &ones, &config.penalty, &config.solver)?;
        mean += fit.theta.coefficients();
    }
    mean.mapv_inplace(|c| c / T::from_count(ensemble_size));
    ParameterVector::new(mean)
}

/// Balancing start used by baseline arms, identical to the loop's own
/// initialization.
pub(crate) fn subg_initial_fractions<T: Scalar>(
    train: &GroupedDataset<T>,
    config: &BilevelConfig<T>,
    pinned_group: Option<usize>,
) -> Result<(SubsampleFractions<T>, usize)> {
    let pinned = pinned_group.unwrap_or_else(|| smallest_group(train));
    let floor = fraction_floor(train, config.allow_zero_fractions);
    Ok((balancing_fractions(train, pinned, floor)?, pinned))
}
