use std::fmt;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Treatment arm of a stratum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Treated,
    Control,
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arm::Treated => f.write_str("treated"),
            Arm::Control => f.write_str("control"),
        }
    }
}

/// A single broken invariant found while validating a [`crate::FusionInput`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    LengthMismatch {
        field: &'static str,
        expected: usize,
        found: usize,
    },
    EmptyInput,
    NonFinite {
        field: &'static str,
        index: usize,
    },
    NonPositiveRctVariance {
        index: usize,
        value: f64,
    },
    NegativeObsVariance {
        index: usize,
        value: f64,
    },
    NonPositiveWeight {
        index: usize,
        value: f64,
    },
    WeightSum {
        sum: f64,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::LengthMismatch {
                field,
                expected,
                found,
            } => {
                write!(
                    f,
                    "length mismatch: {field} has length {found}, expected {expected}"
                )
            }
            Violation::EmptyInput => f.write_str("input has zero strata"),
            Violation::NonFinite { field, index } => {
                write!(f, "non-finite value in {field} at index {index}")
            }
            Violation::NonPositiveRctVariance { index, value } => {
                write!(f, "nonpositive RCT variance at index {index} ({value})")
            }
            Violation::NegativeObsVariance { index, value } => {
                write!(
                    f,
                    "negative observational variance at index {index} ({value})"
                )
            }
            Violation::NonPositiveWeight { index, value } => {
                write!(f, "nonpositive weight at index {index} ({value})")
            }
            Violation::WeightSum { sum } => write!(f, "weights sum {sum} ≠ 1"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {}", join(.0))]
    Validation(Vec<Violation>),

    #[error("dimension mismatch in {what}: expected length {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("stratum {stratum} has an empty {arm} arm")]
    EmptyArm { stratum: usize, arm: Arm },

    #[error("stratum {stratum} {arm} arm has {size} units, at least {required} required")]
    ArmTooSmall {
        stratum: usize,
        arm: Arm,
        size: usize,
        required: usize,
    },

    #[error("stratum {0} has no units")]
    EmptyStratum(usize),

    #[error("unit {index}: stratum {stratum} is outside [0, {k})")]
    StratumOutOfRange {
        index: usize,
        stratum: usize,
        k: usize,
    },

    #[error("unit {0} has no estimated propensity (p_hat)")]
    MissingPropensity(usize),

    #[error("unit {index} has propensity {value} outside (0, 1)")]
    InvalidPropensity { index: usize, value: f64 },

    #[error("propensity model: design matrix with intercept is rank deficient")]
    RankDeficient,

    #[error("propensity model: perfect separation detected, coefficients diverge")]
    Separation,

    #[error("stratum {0} too small for bootstrap")]
    BootstrapExhausted(usize),

    #[error("replicate (outer {outer}, inner {inner}) failed: {source}")]
    Replicate {
        outer: usize,
        inner: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    /// True for errors caused by the caller's data or parameters rather than
    /// an internal failure.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::Io(_))
    }
}

fn join(v: &[Violation]) -> String {
    v.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}
