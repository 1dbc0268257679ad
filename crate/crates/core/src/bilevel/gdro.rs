//! Worst-group-objective weight optimization.
//!
//! There is no separate test distribution here: the model is still fitted
//! with a group-weighted loss, but the outer objective is the largest
//! per-group validation loss. Adaptive loss weights `q` track the
//! per-group losses multiplicatively and weight the validation gradient in
//! the hypergradient, so groups that lag pull the group weights toward
//! themselves; iterate selection uses the worst-group loss itself.

use super::{
    argmin_step, per_group_val_losses, split_with_coverage, BilevelConfig, BilevelRun,
    InnerDiagnostics, TraceRecord,
};
use crate::data::GroupedDataset;
use crate::error::Result;
use crate::estimators::logistic_fit_warm;
use crate::hypergrad::hypergradient_group_weights_with;
use crate::scalar::Scalar;
use crate::weights::{
    normalize_simplex, per_observation_weights_raw, SimplexWeights,
};

/// Multiplicative loss-weight update: `q_g <- q_g exp(rate * loss_g)`,
/// renormalized.
pub(crate) fn update_loss_weights<T: Scalar>(
    q: &SimplexWeights<T>,
    per_group_losses: &[T],
    rate: T,
) -> Result<SimplexWeights<T>> {
    let max_loss = per_group_losses
        .iter()
        .copied()
        .fold(T::neg_infinity(), T::max);
    let raw: Vec<T> = q
        .values()
        .iter()
        .zip(per_group_losses)
        .map(|(&qg, &lg)| qg * (rate * (lg - max_loss)).exp())
        .collect();
    normalize_simplex(&raw)
}

/// Per-observation validation weights that turn the mean weighted loss into
/// `sum_g q_g * mean-loss-of-group-g`.
pub(crate) fn loss_weighted_val_weights<T: Scalar>(
    q: &SimplexWeights<T>,
    val: &GroupedDataset<T>,
) -> Vec<T> {
    let n_val = T::from_count(val.len());
    (0..val.num_groups())
        .map(|g| {
            let count = val.group_count(g + 1);
            if count == 0 {
                T::zero()
            } else {
                q.values()[g] * n_val / T::from_count(count)
            }
        })
        .collect()
}

/// Empirical training marginals used as the weight denominators when no
/// shift specification exists.
pub(crate) fn empirical_marginals<T: Scalar>(train: &GroupedDataset<T>) -> Vec<T> {
    let n = T::from_count(train.len());
    train
        .group_counts()
        .iter()
        .map(|&c| T::from_count(c) / n)
        .collect()
}

/// Optimize group weights for the worst-group validation loss.
///
/// Both the group weights and the loss weights start uniform. Each step
/// fits the weighted model (weights `p_g` over empirical training
/// marginals), updates `p` along the hypergradient of the `q`-weighted
/// validation loss, and scales `q` by the exponentiated per-group
/// validation losses. The returned iterate minimizes the worst-group
/// validation loss over the trace.
pub fn optimize_gdro<T: Scalar>(
    data: &GroupedDataset<T>,
    n_train: usize,
    config: &BilevelConfig<T>,
) -> Result<BilevelRun<T>> {
    config.validate()?;
    let split = split_with_coverage(data, n_train, config.seed, config.stratified_split)?;
    let marginals = empirical_marginals(&split.train);

    let mut p = SimplexWeights::uniform(split.train.num_groups());
    let mut q = SimplexWeights::uniform(split.train.num_groups());
    let mut u = vec![T::zero(); p.num_groups()];
    let mut warm = crate::data::ParameterVector::zeros(split.train.dim());
    let mut pending_zeta: Option<Vec<T>> = None;
    let mut pending_u: Option<Vec<T>> = None;
    let mut pending_condition: Option<T> = None;

    let mut trace = Vec::with_capacity(config.max_steps + 1);
    let mut best: Option<(usize, T, Vec<T>, crate::data::ParameterVector<T>)> = None;

    for step in 0..=config.max_steps {
        let weights = per_observation_weights_raw(p.values(), &marginals, split.train.groups())?;
        let fit =
            logistic_fit_warm(&split.train, &weights, &config.penalty, &config.solver, warm)?;
        warm = fit.theta.clone();
        let group_losses = per_group_val_losses(&fit.theta, &split.val)?;
        let objective = group_losses
            .iter()
            .copied()
            .fold(T::neg_infinity(), T::max);

        trace.push(TraceRecord {
            step,
            weights: p.values().to_vec(),
            loss_weights: Some(q.values().to_vec()),
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

        let val_weights = loss_weighted_val_weights(&q, &split.val);
        let report = hypergradient_group_weights_with(
            &fit.theta,
            &split.train,
            &split.val,
            &p,
            &marginals,
            &val_weights,
            &config.penalty,
            config.damping,
            config.solver.gradient_tolerance,
        )?;
        let zeta: Vec<T> = report.gradient.iter().map(|&g| -g).collect();
        let (p_next, u_next) =
            super::exp_grad_step(&p, &zeta, &u, config.learning_rate, config.momentum)?;
        p = p_next;
        u = u_next.clone();
        q = update_loss_weights(&q, &group_losses, config.q_learning_rate)?;
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_weight_update_by_hand() {
        let q = SimplexWeights::new(vec![0.5, 0.5]).unwrap();
        let q2 = update_loss_weights(&q, &[1.0, 0.0], std::f64::consts::LN_2).unwrap();
        assert!((q2.values()[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((q2.values()[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn equal_losses_leave_loss_weights_unchanged() {
        let q = SimplexWeights::new(vec![0.2, 0.3, 0.5]).unwrap();
        let q2 = update_loss_weights(&q, &[0.7, 0.7, 0.7], 0.1).unwrap();
        for (a, b) in q.values().iter().zip(q2.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
