//! Error taxonomy shared by every layer of the toolkit.
//!
//! Variants are split by responsibility: scenario loading reports
//! [`Error::ParseError`] / [`Error::UnknownKey`] / [`Error::ConstraintViolation`],
//! closed-form evaluators refuse out-of-regime inputs with
//! [`Error::ModeMismatch`], simulation guards the admissibility of controls
//! and density generators pathwise, and the numerical solvers surface their
//! own failure modes (bracketing, shooting, conditioning, budgets).

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failures the toolkit can produce.
#[derive(Debug, Error)]
pub enum Error {
    /// A scenario field violates a model constraint at some time point.
    #[error("constraint violated: {name} at t={t}: value {value}")]
    ConstraintViolation { name: String, t: f64, value: f64 },

    /// The config text could not be parsed. Line is 0 when unknown.
    #[error("parse error at line {line}: {message}")]
    ParseError { line: usize, message: String },

    /// The config contains a key outside the schema.
    #[error("unknown configuration key: {key}")]
    UnknownKey { key: String },

    /// A closed-form evaluator was called outside its regime.
    #[error("mode mismatch: {0}")]
    ModeMismatch(String),

    /// The insider specification is not one of the supported signal types.
    #[error("unsupported insider signal: {0}")]
    UnsupportedInsider(String),

    /// A kernel or density was evaluated outside its domain.
    #[error("domain error: {0}")]
    DomainError(String),

    /// A control left the admissible region on a simulated path.
    #[error("inadmissible control on path {path} at t={t}: {detail}")]
    AdmissibilityBreach { path: usize, t: f64, detail: String },

    /// A density generator component reached -1 or below on a simulated path.
    #[error("density generator breach on path {path} at t={t}: {detail}")]
    GeneratorBreach { path: usize, t: f64, detail: String },

    /// The saddle candidate sits on the search-grid boundary.
    #[error("saddle candidate on grid boundary: {0}")]
    GridTooCoarse(String),

    /// Shooting on the terminal constant failed to converge.
    #[error("shooting failed to converge: {0}")]
    ShootingDiverged(String),

    /// The regression design is numerically unusable.
    #[error("regression system ill conditioned: {0}")]
    RegressionIllConditioned(String),

    /// Nested Monte Carlo would exceed the configured work budget.
    #[error("nested Monte Carlo budget exceeded: {0}")]
    NestedMcBudgetExceeded(String),

    /// A denominator of the strategy maps vanishes for these parameters.
    #[error("singular configuration: {0}")]
    SingularConfiguration(String),

    /// A root finder found no sign change over its bracket.
    #[error("no sign change in root bracket: {0}")]
    NoBracket(String),

    /// The requested feature is only available behind the experimental flag.
    #[error("experimental feature disabled: {0}")]
    ExperimentalFeature(String),

    /// Underlying I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code used by the command line interface.
    ///
    /// Stable contract: 2 mode mismatch, 3 admissibility breach,
    /// 4 shooting divergence, 5 missing root bracket, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ModeMismatch(_) => 2,
            Error::AdmissibilityBreach { .. } => 3,
            Error::ShootingDiverged(_) => 4,
            Error::NoBracket(_) => 5,
            _ => 1,
        }
    }
}
