//! Outer optimization loops: exponentiated-gradient weight estimation for
//! GW-ERM, the subsampling relaxation (SUBG) and its ensemble variant
//! (DFR), the worst-group objective (GDRO), and inferred-group weights
//! (JTT), with full iterate tracing and argmin-over-trace selection.
//!
//! Every loop follows the same skeleton: split the data once, refit the
//! inner estimator at the current weights, compute the hypergradient
//! through the fit, take a momentum exponentiated-gradient step, and at the
//! end return the traced iterate (including the initialization) with the
//! best outer objective. Selection over the whole trace means the returned
//! weights are never worse on the outer objective than the heuristic
//! start.

mod compare;
mod gdro;
mod gw_erm;
mod jtt;
mod subg;

pub use compare::{
    run_comparison, ComparisonConfig, ComparisonSummary, ComparisonTable, Method, SeedOutcome,
};
pub use gdro::optimize_gdro;
pub use gw_erm::optimize_gw_erm;
pub use jtt::{optimize_jtt, IdentificationConfig, InferredCell, InferredGroups, JttRun};
pub use subg::{dfr_step_seed, optimize_dfr, optimize_subg};

use crate::data::{split_train_val, split_train_val_stratified, GroupedDataset, ParameterVector, Split};
use crate::error::{Error, Result};
use crate::estimators::{FitResult, PenaltySpec, SolverConfig};
use crate::scalar::Scalar;
use crate::seed::derive_seed;
use crate::weights::SimplexWeights;
use serde::{Deserialize, Serialize};

/// Settings shared by all outer loops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BilevelConfig<T> {
    /// Exponentiated-gradient learning rate for the group weights.
    pub learning_rate: T,
    /// Momentum on the hypergradient buffer, in `[0, 1)`.
    pub momentum: T,
    /// Outer steps `T`; the trace then holds `T + 1` iterates. Zero steps
    /// evaluate the initialization only (a no-op run used as a control).
    pub max_steps: usize,
    /// Learning rate of the loss-weight update (worst-group objective only).
    pub q_learning_rate: T,
    /// Damping added to the inner Hessian before the implicit solves.
    pub damping: T,
    pub penalty: PenaltySpec<T>,
    pub solver: SolverConfig<T>,
    pub seed: u64,
    /// Allow subsample fractions to reach zero (default floors them at one
    /// observation so no group is silently emptied).
    pub allow_zero_fractions: bool,
    /// Stratify the train/validation split by group (off by default; the
    /// split is plain uniform to match how such data arrives in practice).
    pub stratified_split: bool,
}

impl<T: Scalar> Default for BilevelConfig<T> {
    fn default() -> Self {
        Self {
            learning_rate: T::of(0.1),
            momentum: T::of(0.5),
            max_steps: 100,
            q_learning_rate: T::of(0.1),
            damping: T::of(1e-6),
            penalty: PenaltySpec::ridge(T::of(0.1)),
            solver: SolverConfig::default(),
            seed: 0,
            allow_zero_fractions: false,
            stratified_split: false,
        }
    }
}

impl<T: Scalar> BilevelConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > T::zero()) {
            return Err(Error::Domain("learning_rate must be positive".into()));
        }
        if self.momentum < T::zero() || self.momentum >= T::one() {
            return Err(Error::Domain("momentum must lie in [0, 1)".into()));
        }
        if !(self.q_learning_rate > T::zero()) {
            return Err(Error::Domain("q_learning_rate must be positive".into()));
        }
        if self.damping < T::zero() {
            return Err(Error::Domain("damping must be non-negative".into()));
        }
        self.penalty.validate()?;
        self.solver.validate()
    }
}

/// Inner-fit diagnostics carried by each trace record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerDiagnostics<T> {
    pub iterations: usize,
    pub converged: bool,
    pub gradient_norm: T,
    pub final_loss: T,
}

impl<T: Scalar> InnerDiagnostics<T> {
    fn from_fit(fit: &FitResult<T>) -> Self {
        Self {
            iterations: fit.iterations,
            converged: fit.converged,
            gradient_norm: fit.gradient_norm,
            final_loss: fit.final_loss,
        }
    }
}

/// One outer-iteration snapshot: the weights of step `t`, their outer
/// objective, and the update ingredients that produced them (`None` at the
/// initialization). Serialized one-per-line into run traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord<T> {
    pub step: usize,
    pub weights: Vec<T>,
    /// Loss weights `q` (worst-group objective only).
    #[serde(rename = "q")]
    pub loss_weights: Option<Vec<T>>,
    pub objective: T,
    /// The hypergradient-descent direction `zeta` applied to reach these
    /// weights.
    pub hypergradient: Option<Vec<T>>,
    /// Momentum buffer after the update that produced these weights.
    pub momentum: Option<Vec<T>>,
    pub inner_iterations: usize,
    pub inner_converged: bool,
    pub damping_used: T,
    /// Condition estimate of the damped Hessian behind `hypergradient`.
    pub hessian_condition: Option<T>,
    #[serde(skip)]
    pub inner: Option<InnerDiagnostics<T>>,
}

/// Outcome of an outer optimization run.
#[derive(Debug, Clone)]
pub struct BilevelRun<T> {
    /// The trace iterate with the best outer objective (earliest on ties).
    pub selected_weights: Vec<T>,
    /// Inner parameters fitted at the selected weights.
    pub selected_theta: ParameterVector<T>,
    pub selected_step: usize,
    pub selected_objective: T,
    pub trace: Vec<TraceRecord<T>>,
    /// Row indices of the split used for the run (into the input data).
    pub train_rows: Vec<usize>,
    pub val_rows: Vec<usize>,
}

/// One multiplicative (exponentiated-gradient) step on the simplex:
/// `u_new = momentum * u_prev + (1 - momentum) * zeta`, then
/// `p_new proportional to p * exp(rate * u_new)`. Computed in the log
/// domain with max-subtraction, so large updates cannot overflow; strictly
/// positive entries stay strictly positive and zero entries stay zero.
pub fn exp_grad_step<T: Scalar>(
    p: &SimplexWeights<T>,
    zeta: &[T],
    u_prev: &[T],
    rate: T,
    momentum: T,
) -> Result<(SimplexWeights<T>, Vec<T>)> {
    let g = p.num_groups();
    if zeta.len() != g || u_prev.len() != g {
        return Err(Error::Size("update vectors must match the group count".into()));
    }
    if zeta.iter().chain(u_prev).any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite update component".into()));
    }
    let u_new: Vec<T> = u_prev
        .iter()
        .zip(zeta)
        .map(|(&u, &z)| momentum * u + (T::one() - momentum) * z)
        .collect();
    let logs: Vec<Option<T>> = p
        .values()
        .iter()
        .zip(&u_new)
        .map(|(&pg, &ug)| (pg > T::zero()).then(|| pg.ln() + rate * ug))
        .collect();
    let max_log = logs
        .iter()
        .flatten()
        .copied()
        .fold(T::neg_infinity(), T::max);
    let raw: Vec<T> = logs
        .iter()
        .map(|l| l.map_or(T::zero(), |v| (v - max_log).exp()))
        .collect();
    let p_new = crate::weights::normalize_simplex(&raw)?;
    Ok((p_new, u_new))
}

/// Split with every group represented in both halves, retrying with fresh
/// derived seeds up to ten times before reporting which group failed.
pub fn split_with_coverage<T: Scalar>(
    data: &GroupedDataset<T>,
    n_train: usize,
    seed: u64,
    stratified: bool,
) -> Result<Split<T>> {
    const ATTEMPTS: usize = 10;
    let mut missing = 1usize;
    for attempt in 0..ATTEMPTS {
        let split = if stratified {
            split_train_val_stratified(data, n_train, derive_seed(seed, attempt as u64))?
        } else {
            split_train_val(data, n_train, derive_seed(seed, attempt as u64))?
        };
        match (1..=data.num_groups())
            .find(|&g| split.train.group_count(g) == 0 || split.val.group_count(g) == 0)
        {
            None => return Ok(split),
            Some(g) => missing = g,
        }
    }
    Err(Error::GroupCoverage { group: missing, attempts: ATTEMPTS })
}

/// Earliest index attaining the minimum objective over the trace.
pub(crate) fn argmin_step<T: Scalar>(trace: &[TraceRecord<T>]) -> usize {
    let mut best = 0usize;
    for (k, rec) in trace.iter().enumerate() {
        if rec.objective < trace[best].objective {
            best = k;
        }
    }
    best
}

/// Ratio-weighted mean validation loss `(1/n_val) sum_i w(g_i) l_i` used as
/// the outer objective of the average-case methods.
pub(crate) fn group_weighted_val_loss<T: Scalar>(
    theta: &ParameterVector<T>,
    val: &GroupedDataset<T>,
    group_weights: &[T],
) -> Result<T> {
    let w: Vec<T> = val.groups().iter().map(|&g| group_weights[g - 1]).collect();
    crate::estimators::weighted_logistic_loss(theta, val, &w, &PenaltySpec::None)
}

/// Per-group mean validation losses; every group must be present.
pub(crate) fn per_group_val_losses<T: Scalar>(
    theta: &ParameterVector<T>,
    val: &GroupedDataset<T>,
) -> Result<Vec<T>> {
    let z = val.features().dot(theta.coefficients());
    let mut sums = vec![T::zero(); val.num_groups()];
    for i in 0..val.len() {
        let zi = z[i];
        let li = zi.max(T::zero()) + (-zi.abs()).exp().ln_1p() - val.targets()[i] * zi;
        sums[val.groups()[i] - 1] += li;
    }
    sums.iter()
        .zip(val.group_counts())
        .enumerate()
        .map(|(g, (&s, &n))| {
            if n == 0 {
                Err(Error::EmptyGroup { group: g + 1 })
            } else {
                Ok(s / T::from_count(n))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exp_grad_fixed_point_at_zero_update() {
        let p = SimplexWeights::new(vec![0.3, 0.7]).unwrap();
        let (p_new, u) = exp_grad_step(&p, &[0.0, 0.0], &[0.0, 0.0], 0.1, 0.5).unwrap();
        assert_eq!(p_new.values(), p.values());
        assert_eq!(u, vec![0.0, 0.0]);
    }

    #[test]
    fn exp_grad_hand_update() {
        let p = SimplexWeights::new(vec![0.5, 0.5]).unwrap();
        let (p_new, _) =
            exp_grad_step(&p, &[std::f64::consts::LN_2, 0.0], &[0.0, 0.0], 1.0, 0.0).unwrap();
        assert!((p_new.values()[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((p_new.values()[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn exp_grad_momentum_mixes_the_buffer() {
        let p = SimplexWeights::new(vec![0.5, 0.5]).unwrap();
        let (_, u) = exp_grad_step(&p, &[1.0, -1.0], &[0.4, 0.4], 0.1, 0.5).unwrap();
        assert!((u[0] - (0.5 * 0.4 + 0.5 * 1.0)).abs() < 1e-15);
        assert!((u[1] - (0.5 * 0.4 - 0.5 * 1.0)).abs() < 1e-15);
    }

    #[test]
    fn exp_grad_stays_positive_and_normalized_under_huge_updates() {
        let p = SimplexWeights::new(vec![0.25, 0.25, 0.5]).unwrap();
        let mut rng = crate::seed::rng_from_seed(5);
        let mut cur = p;
        let mut u = vec![0.0; 3];
        for _ in 0..100 {
            let zeta: Vec<f64> = (0..3)
                .map(|_| (rand::Rng::random::<f64>(&mut rng) - 0.5) * 2000.0)
                .collect();
            let (next, u_next) = exp_grad_step(&cur, &zeta, &u, 1.0, 0.3).unwrap();
            let sum: f64 = next.values().iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(next.values().iter().all(|&v| v > 0.0));
            cur = next;
            u = u_next;
        }
    }

    #[test]
    fn exp_grad_keeps_zero_coordinates_zero() {
        let p = SimplexWeights::new(vec![0.0, 0.4, 0.6]).unwrap();
        let (p_new, _) = exp_grad_step(&p, &[5.0, 0.0, -1.0], &[0.0; 3], 1.0, 0.0).unwrap();
        assert_eq!(p_new.values()[0], 0.0);
        assert!(p_new.values()[1] > 0.0 && p_new.values()[2] > 0.0);
    }

    #[test]
    fn argmin_breaks_ties_toward_the_earliest_step() {
        let mk = |step: usize, objective: f64| TraceRecord {
            step,
            weights: vec![1.0],
            loss_weights: None,
            objective,
            hypergradient: None,
            momentum: None,
            inner_iterations: 0,
            inner_converged: true,
            damping_used: 0.0,
            hessian_condition: None,
            inner: None,
        };
        let trace = vec![mk(0, 0.5), mk(1, 0.4), mk(2, 0.4), mk(3, 0.6)];
        assert_eq!(argmin_step(&trace), 1);
    }
}
