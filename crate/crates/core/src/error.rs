//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by dataset construction, estimators, hypergradients and
/// the outer optimization loops.
#[derive(Debug, Error)]
pub enum Error {
    /// A group needed at test time has zero training probability.
    #[error("support violation: group {group} has zero training probability but positive test probability or is present in the data")]
    SupportViolation { group: usize },

    /// A weight vector that cannot be normalized or fails positivity.
    #[error("degenerate weights: {0}")]
    DegenerateWeights(String),

    /// A size or count precondition failed.
    #[error("size error: {0}")]
    Size(String),

    /// An input lies outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// The (weighted) design matrix is numerically singular.
    #[error("singular design: condition estimate {condition:.3e} exceeds the invertibility threshold")]
    SingularDesign { condition: f64 },

    /// Unpenalized logistic fit diverged on (nearly) separable data.
    #[error("separable data: coefficient norm {norm:.3e} exceeded the divergence guard; add a penalty")]
    SeparableData { norm: f64 },

    /// A group required by an operation has no observations.
    #[error("empty group: group {group} has no observations")]
    EmptyGroup { group: usize },

    /// The damped Hessian is too ill-conditioned to invert reliably.
    #[error("ill-conditioned system: condition estimate {condition:.3e} exceeds 1e12")]
    IllConditioned { condition: f64 },

    /// The inner solution is not stationary, so the implicit function
    /// theorem does not apply.
    #[error("stale inner solution: gradient norm {grad_norm:.3e} exceeds 10x solver tolerance {tolerance:.3e}")]
    Staleness { grad_norm: f64, tolerance: f64 },

    /// A train/validation split could not represent every group.
    #[error("group coverage: group {group} missing from one split half after {attempts} attempts")]
    GroupCoverage { group: usize, attempts: usize },

    /// An inferred group cell is empty and cannot be merged.
    #[error("empty inferred group: class {class} has no observations in the training half")]
    EmptyInferredGroup { class: usize },

    /// Every group is empty or undefined.
    #[error("all groups empty: no defined per-group values")]
    AllGroupsEmpty,

    /// Malformed input file.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Header/column mismatch in an input file.
    #[error("schema error: {0}")]
    Schema(String),

    /// A well-formed field holds an invalid value.
    #[error("value error at line {line}: {message}")]
    Value { line: usize, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Whether this error reflects a numerical failure (as opposed to
    /// invalid input). CLI consumers map numerical failures to exit code 2
    /// and validation failures to exit code 1.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::SingularDesign { .. }
                | Error::SeparableData { .. }
                | Error::IllConditioned { .. }
                | Error::Staleness { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
