//! Shared domain types: loss weights, the fusion input pair, estimator output,
//! and the weighted squared-error loss.
//!
//! The loss weight matrix is diagonal with entries `d_k / K`. It is never
//! materialized; every quadratic form is a weighted sum over strata.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Violation};
use crate::numeric::compensated_sum;

/// Absolute tolerance on `sum(d) == 1`.
pub const WEIGHT_SUM_TOL: f64 = 1e-10;

/// Stratum importance weights `d_1..d_K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeightedLossSpec {
    d: Vec<f64>,
}

impl WeightedLossSpec {
    /// Validated constructor. Weights are never renormalized here; use
    /// [`WeightedLossSpec::normalized`] for that.
    pub fn new(d: Vec<f64>) -> Result<Self> {
        let spec = Self { d };
        let v = spec.violations();
        if v.is_empty() {
            Ok(spec)
        } else {
            Err(Error::Validation(v))
        }
    }

    /// Weights proportional to `raw`, rescaled to sum to one.
    pub fn normalized(raw: &[f64]) -> Result<Self> {
        let total = compensated_sum(raw.iter().copied());
        if !(total.is_finite() && total > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "cannot normalize weights with total {total}"
            )));
        }
        Self::new(raw.iter().map(|x| x / total).collect())
    }

    /// Equal weights `1/K`.
    pub fn uniform(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Validation(vec![Violation::EmptyInput]));
        }
        Ok(Self {
            d: vec![1.0 / k as f64; k],
        })
    }

    pub fn k(&self) -> usize {
        self.d.len()
    }

    pub fn d(&self) -> &[f64] {
        &self.d
    }

    /// Diagonal entry `d_k / K` of the loss matrix.
    #[inline]
    pub fn loss_weight(&self, k: usize) -> f64 {
        self.d[k] / self.d.len() as f64
    }

    /// `(1/K) sum_k d_k f(k)`.
    pub fn weighted_sum(&self, f: impl Fn(usize) -> f64) -> f64 {
        compensated_sum((0..self.k()).map(|k| self.d[k] * f(k))) / self.k() as f64
    }

    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.d.is_empty() {
            out.push(Violation::EmptyInput);
            return out;
        }
        for (i, &x) in self.d.iter().enumerate() {
            if !x.is_finite() {
                out.push(Violation::NonFinite {
                    field: "d",
                    index: i,
                });
            } else if x <= 0.0 {
                out.push(Violation::NonPositiveWeight { index: i, value: x });
            }
        }
        let sum = compensated_sum(self.d.iter().copied());
        if sum.is_finite() && (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            out.push(Violation::WeightSum { sum });
        }
        out
    }
}

/// The pair of effect estimates every estimator consumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionInput {
    pub tau_r: Vec<f64>,
    pub tau_o: Vec<f64>,
    pub sigma_r2: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_o2: Option<Vec<f64>>,
    #[serde(rename = "d")]
    pub weights: WeightedLossSpec,
}

impl FusionInput {
    pub fn new(
        tau_r: Vec<f64>,
        tau_o: Vec<f64>,
        sigma_r2: Vec<f64>,
        sigma_o2: Option<Vec<f64>>,
        weights: WeightedLossSpec,
    ) -> Result<Self> {
        let input = Self {
            tau_r,
            tau_o,
            sigma_r2,
            sigma_o2,
            weights,
        };
        validate_fusion_input(&input)?;
        Ok(input)
    }

    pub fn k(&self) -> usize {
        self.tau_r.len()
    }

    /// Parses and validates a JSON document.
    pub fn from_json_str(s: &str) -> Result<Self> {
        let input: Self = serde_json::from_str(s)?;
        validate_fusion_input(&input)?;
        Ok(input)
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `tau_o - tau_r`, componentwise.
    pub fn discrepancy(&self) -> Vec<f64> {
        self.tau_o
            .iter()
            .zip(&self.tau_r)
            .map(|(o, r)| o - r)
            .collect()
    }

    /// Same input with both estimates shifted by `c`.
    pub fn translated(&self, c: &[f64]) -> Self {
        let mut out = self.clone();
        for k in 0..self.k() {
            out.tau_r[k] += c[k];
            out.tau_o[k] += c[k];
        }
        out
    }
}

/// Checks every invariant of a [`FusionInput`], collecting all violations.
pub fn validate_fusion_input(input: &FusionInput) -> Result<()> {
    let mut v = Vec::new();
    let k = input.tau_r.len();
    if k == 0 {
        v.push(Violation::EmptyInput);
    }
    let mut check_len = |field: &'static str, found: usize| {
        if found != k {
            v.push(Violation::LengthMismatch {
                field,
                expected: k,
                found,
            });
        }
    };
    check_len("tau_o", input.tau_o.len());
    check_len("sigma_r2", input.sigma_r2.len());
    if let Some(so) = &input.sigma_o2 {
        check_len("sigma_o2", so.len());
    }
    check_len("d", input.weights.k());

    for (field, xs) in [("tau_r", &input.tau_r), ("tau_o", &input.tau_o)] {
        for (i, x) in xs.iter().enumerate() {
            if !x.is_finite() {
                v.push(Violation::NonFinite { field, index: i });
            }
        }
    }
    for (i, &s) in input.sigma_r2.iter().enumerate() {
        if !s.is_finite() {
            v.push(Violation::NonFinite {
                field: "sigma_r2",
                index: i,
            });
        } else if s <= 0.0 {
            v.push(Violation::NonPositiveRctVariance { index: i, value: s });
        }
    }
    if let Some(so) = &input.sigma_o2 {
        for (i, &s) in so.iter().enumerate() {
            if !s.is_finite() {
                v.push(Violation::NonFinite {
                    field: "sigma_o2",
                    index: i,
                });
            } else if s < 0.0 {
                v.push(Violation::NegativeObsVariance { index: i, value: s });
            }
        }
    }
    v.extend(
        input
            .weights
            .violations()
            .into_iter()
            .filter(|x| !matches!(x, Violation::EmptyInput) || k != 0),
    );
    if v.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(v))
    }
}

/// Fused estimate plus the per-component weight placed on `tau_o`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShrinkageOutput {
    pub estimate: Vec<f64>,
    /// Effective weight on `tau_o` for each component.
    pub factors: Vec<f64>,
    pub method: String,
    pub diagnostics: BTreeMap<String, f64>,
}

impl ShrinkageOutput {
    /// Builds `(1 - f_k) tau_r + f_k tau_o`.
    pub fn from_factors(input: &FusionInput, factors: Vec<f64>, method: impl Into<String>) -> Self {
        let estimate = (0..input.k())
            .map(|k| combine(input.tau_r[k], input.tau_o[k], factors[k]))
            .collect();
        Self {
            estimate,
            factors,
            method: method.into(),
            diagnostics: BTreeMap::new(),
        }
    }

    pub fn with_diagnostic(mut self, name: &str, value: f64) -> Self {
        self.diagnostics.insert(name.to_string(), value);
        self
    }
}

/// `tau_r - f (tau_r - tau_o)`, exact at `f = 0` and `f = 1`.
#[inline]
pub(crate) fn combine(tau_r: f64, tau_o: f64, f: f64) -> f64 {
    if f == 1.0 {
        tau_o
    } else {
        tau_r - f * (tau_r - tau_o)
    }
}

/// True bias and variance of the observational estimate; only known in
/// simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSpec {
    pub xi: Vec<f64>,
    pub sigma_o2: Vec<f64>,
}

impl OracleSpec {
    pub fn new(xi: Vec<f64>, sigma_o2: Vec<f64>) -> Result<Self> {
        if xi.len() != sigma_o2.len() {
            return Err(Error::DimensionMismatch {
                what: "oracle sigma_o2",
                expected: xi.len(),
                found: sigma_o2.len(),
            });
        }
        Ok(Self { xi, sigma_o2 })
    }
}

/// `(1/K) sum_k d_k (tau_hat_k - tau_k)^2`.
pub fn weighted_loss(tau_hat: &[f64], tau: &[f64], weights: &WeightedLossSpec) -> Result<f64> {
    let k = weights.k();
    for (what, len) in [("tau_hat", tau_hat.len()), ("tau", tau.len())] {
        if len != k {
            return Err(Error::DimensionMismatch {
                what,
                expected: k,
                found: len,
            });
        }
    }
    Ok(weights.weighted_sum(|i| {
        let r = tau_hat[i] - tau[i];
        r * r
    }))
}
