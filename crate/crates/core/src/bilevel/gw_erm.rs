//! Group-weighted ERM with optimized weights.

use super::{
    argmin_step, group_weighted_val_loss, split_with_coverage, BilevelConfig, BilevelRun,
    InnerDiagnostics, TraceRecord,
};
use crate::data::GroupedDataset;
use crate::error::Result;
use crate::estimators::logistic_fit_warm;
use crate::hypergrad::hypergradient_group_weights;
use crate::scalar::Scalar;
use crate::weights::{likelihood_ratios, normalize_simplex, per_observation_weights, ShiftSpec};

/// Estimate optimal group weights for the group-weighted loss.
///
/// The weights start at the normalized likelihood ratios (the standard
/// heuristic); each step refits the penalized logistic model at the current
/// weights (warm-started from the previous fit, with stationarity verified
/// afterwards so warm starts affect speed only), descends the hypergradient
/// of the ratio-weighted validation loss with a momentum exponentiated
/// update, and renormalizes. The returned weights are the traced iterate
/// with the lowest validation objective, which includes the start.
pub fn optimize_gw_erm<T: Scalar>(
    data: &GroupedDataset<T>,
    shift: &ShiftSpec<T>,
    n_train: usize,
    config: &BilevelConfig<T>,
) -> Result<BilevelRun<T>> {
    config.validate()?;
    let ratios = likelihood_ratios(shift)?;
    let split = split_with_coverage(data, n_train, config.seed, config.stratified_split)?;

    let mut p = normalize_simplex(ratios.values())?;
    let mut u = vec![T::zero(); p.num_groups()];
    let mut warm = crate::data::ParameterVector::zeros(split.train.dim());
    let mut pending_zeta: Option<Vec<T>> = None;
    let mut pending_u: Option<Vec<T>> = None;
    let mut pending_condition: Option<T> = None;

    let mut trace = Vec::with_capacity(config.max_steps + 1);
    let mut best: Option<(usize, T, Vec<T>, crate::data::ParameterVector<T>)> = None;

    for step in 0..=config.max_steps {
        let weights = per_observation_weights(&p, shift, split.train.groups())?;
        let fit =
            logistic_fit_warm(&split.train, &weights, &config.penalty, &config.solver, warm)?;
        warm = fit.theta.clone();
        let objective = group_weighted_val_loss(&fit.theta, &split.val, ratios.values())?;

        trace.push(TraceRecord {
            step,
            weights: p.values().to_vec(),
            loss_weights: None,
            objective,
            hypergradient: pending_zeta.take(),
            momentum: pending_u.take(),
            inner_iterations: fit.iterations,
            inner_converged: fit.converged,
            damping_used: config.damping,
            hessian_condition: pending_condition.take(),
            inner: Some(InnerDiagnostics::from_fit(&fit)),
        });
        if best.as_ref().map_or(true, |(_, obj, _, _)| objective < *obj) {
            best = Some((step, objective, p.values().to_vec(), fit.theta.clone()));
        }
        if step == config.max_steps {
            break;
        }

        let report = hypergradient_group_weights(
            &fit.theta,
            &split.train,
            &split.val,
            &p,
            shift,
            &ratios,
            &config.penalty,
            config.damping,
            config.solver.gradient_tolerance,
        )?;
        let zeta: Vec<T> = report.gradient.iter().map(|&g| -g).collect();
        let (p_next, u_next) =
            super::exp_grad_step(&p, &zeta, &u, config.learning_rate, config.momentum)?;
        p = p_next;
        u = u_next.clone();
        pending_zeta = Some(zeta);
        pending_u = Some(u_next);
        pending_condition = Some(report.hessian_condition_estimate);
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
        train_rows: split.train_rows,
        val_rows: split.val_rows,
    })
}
