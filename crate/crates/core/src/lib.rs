//! Group-weight estimation for sub-population shift.
//!
//! When only the marginal group frequencies differ between the training and
//! test distributions, the textbook reweighting choice — likelihood ratios
//! `p_test(g)/p_train(g)` — is asymptotically unbiased but ignores the
//! variance a finite sample adds when small groups are upweighted. This
//! crate provides:
//!
//! - closed-form bias/variance expressions and the optimal group weight for
//!   a two-group weighted-least-squares model, with a Monte Carlo simulator
//!   that checks the approximation ([`theory`]);
//! - weighted estimators: WLS, penalized logistic regression, the relaxed
//!   subsampling objective and a subsampled ensemble ([`estimators`]);
//! - hypergradients of a validation objective with respect to group weights
//!   through the inner `argmin`, via the implicit function theorem
//!   ([`hypergrad`]);
//! - outer optimization loops for GW-ERM, SUBG, DFR, GDRO and JTT with full
//!   iterate tracing ([`bilevel`]);
//! - generalization metrics and paired statistical comparison ([`metrics`]);
//! - a synthetic spurious-correlation generator and CSV/JSON interchange
//!   ([`synth`], [`io`]).
//!
//! All numeric code is generic over [`scalar::Scalar`] (`f32` or `f64`);
//! the crate root exports `f64` aliases for the common types. Randomness
//! enters only through explicit seeds.

pub mod bilevel;
pub mod data;
pub mod error;
pub mod estimators;
pub mod hypergrad;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod scalar;
pub mod seed;
pub mod synth;
pub mod theory;
pub mod weights;

pub use data::{GroupedDataset, ParameterVector, Split};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use weights::{LikelihoodRatios, ShiftSpec, SimplexWeights, SubsampleFractions};

/// `f64` aliases for the commonly used types.
pub type Dataset = GroupedDataset<f64>;
pub type Shift = ShiftSpec<f64>;
pub type Weights = SimplexWeights<f64>;
pub type Fractions = SubsampleFractions<f64>;
pub type Params = ParameterVector<f64>;
