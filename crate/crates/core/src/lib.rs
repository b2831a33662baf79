//! Fusing an unbiased experimental estimate with a biased observational
//! estimate of a vector of stratum-level causal effects.
//!
//! * [`fusion`]: shared types and the weighted squared-error loss.
//! * [`shrinkage`]: risk-estimate-driven shrinkage estimators and baselines.
//! * [`causal`]: unit-level data to stratum effect estimates and variances.
//! * [`sensitivity`]: marginal sensitivity model bounds and the implied confounding level.
//! * [`simulation`]: synthetic populations and the Monte Carlo risk study.

pub mod causal;
pub mod error;
pub mod fusion;
pub mod numeric;
pub mod rng;
pub mod sensitivity;
pub mod shrinkage;
pub mod simulation;

pub use error::{Arm, Error, Result, Violation};
pub use fusion::{
    validate_fusion_input, weighted_loss, FusionInput, OracleSpec, ShrinkageOutput,
    WeightedLossSpec,
};
pub use shrinkage::{DominanceReport, EstimatorId};
