//! Shrinkage estimators that move the unbiased RCT estimate toward the biased
//! observational one.
//!
//! Two shrinkage structures are provided: a common factor shared by every
//! component (`kappa1*`) and a factor proportional to each component's RCT
//! variance (`kappa2*`). In both, the factor minimizes an unbiased estimate of
//! the weighted risk; the starred variants apply a data-estimated correction
//! that shrinks less to pay for estimating the factor. Green–Strawderman
//! estimators and the oracle convex combination are included as baselines.
//!
//! Every factor reported in [`ShrinkageOutput::factors`] is the weight placed
//! on `tau_o`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{FusionInput, OracleSpec, ShrinkageOutput, WeightedLossSpec};
use crate::numeric::compensated_sum;

/// Stable identifiers used by the CLI and in result tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorId {
    TauR,
    TauO,
    Kappa1,
    Kappa1Plus,
    Kappa1PlusStar,
    Kappa2,
    Kappa2Plus,
    Kappa2PlusStar,
    GsDelta1,
    GsDelta2,
    Oracle,
}

impl EstimatorId {
    pub const ALL: [EstimatorId; 11] = [
        EstimatorId::Kappa1,
        EstimatorId::Kappa1Plus,
        EstimatorId::Kappa1PlusStar,
        EstimatorId::Kappa2,
        EstimatorId::Kappa2Plus,
        EstimatorId::Kappa2PlusStar,
        EstimatorId::GsDelta1,
        EstimatorId::GsDelta2,
        EstimatorId::Oracle,
        EstimatorId::TauR,
        EstimatorId::TauO,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorId::TauR => "tau_r",
            EstimatorId::TauO => "tau_o",
            EstimatorId::Kappa1 => "kappa1",
            EstimatorId::Kappa1Plus => "kappa1_plus",
            EstimatorId::Kappa1PlusStar => "kappa1_plus_star",
            EstimatorId::Kappa2 => "kappa2",
            EstimatorId::Kappa2Plus => "kappa2_plus",
            EstimatorId::Kappa2PlusStar => "kappa2_plus_star",
            EstimatorId::GsDelta1 => "gs_delta1",
            EstimatorId::GsDelta2 => "gs_delta2",
            EstimatorId::Oracle => "oracle",
        }
    }

    /// The four URE-derived positive-part estimators.
    pub fn is_proposed(self) -> bool {
        matches!(
            self,
            EstimatorId::Kappa1Plus
                | EstimatorId::Kappa1PlusStar
                | EstimatorId::Kappa2Plus
                | EstimatorId::Kappa2PlusStar
        )
    }
}

impl fmt::Display for EstimatorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EstimatorId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EstimatorId::ALL
            .into_iter()
            .find(|id| id.as_str() == s.trim())
            .ok_or_else(|| {
                let valid: Vec<_> = EstimatorId::ALL.iter().map(|i| i.as_str()).collect();
                Error::InvalidParameter(format!(
                    "unknown estimator '{s}'; valid ids: {}",
                    valid.join(", ")
                ))
            })
    }
}

/// Weighted sums shared by the URE-derived estimators, with `Delta = tau_o - tau_r`
/// and loss matrix entries `D_k = d_k / K`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UreTerms {
    /// `Tr(Sigma_r D)`
    pub trace_sd: f64,
    /// `Tr(Sigma_r^2 D)`
    pub trace_s2d: f64,
    /// `Delta' D Delta`
    pub q_d: f64,
    /// `Delta' Sigma_r^2 D Delta`
    pub q_s2d: f64,
    /// `Delta' D^2 Sigma_r Delta`
    pub q_d2s: f64,
    /// `Delta' Sigma_r^4 D^2 Delta`
    pub q_s4d2: f64,
}

impl UreTerms {
    pub fn new(input: &FusionInput) -> Self {
        let w = &input.weights;
        let s = &input.sigma_r2;
        let delta = input.discrepancy();
        let sum = |f: &dyn Fn(usize) -> f64| compensated_sum((0..input.k()).map(f));
        Self {
            trace_sd: sum(&|k| w.loss_weight(k) * s[k]),
            trace_s2d: sum(&|k| w.loss_weight(k) * s[k] * s[k]),
            q_d: sum(&|k| w.loss_weight(k) * delta[k] * delta[k]),
            q_s2d: sum(&|k| w.loss_weight(k) * s[k] * s[k] * delta[k] * delta[k]),
            q_d2s: sum(&|k| w.loss_weight(k).powi(2) * s[k] * delta[k] * delta[k]),
            q_s4d2: sum(&|k| w.loss_weight(k).powi(2) * s[k].powi(4) * delta[k] * delta[k]),
        }
    }
}

fn coincident_error() -> Error {
    Error::Degenerate(
        "tau_o equals tau_r, so the risk estimate is flat and any shrinkage factor is optimal"
            .into(),
    )
}

/// Unbiased risk estimate of `tau_r - lambda (tau_r - tau_o)` for a fixed `lambda`.
pub fn ure_common_factor(lambda: f64, input: &FusionInput) -> f64 {
    let t = UreTerms::new(input);
    t.trace_sd + lambda * lambda * t.q_d - 2.0 * lambda * t.trace_sd
}

/// Unbiased risk estimate of `tau_r - lambda Sigma_r (tau_r - tau_o)` for a fixed `lambda`.
pub fn ure_variance_weighted(lambda: f64, input: &FusionInput) -> f64 {
    let t = UreTerms::new(input);
    t.trace_sd + lambda * lambda * t.q_s2d - 2.0 * lambda * t.trace_s2d
}

/// Minimizer of [`ure_common_factor`].
pub fn lambda1_ure(input: &FusionInput) -> Result<f64> {
    let t = UreTerms::new(input);
    if t.q_d <= 0.0 {
        return Err(coincident_error());
    }
    Ok(t.trace_sd / t.q_d)
}

/// Correction applied to `lambda1_ure`, from minimizing the risk estimate of
/// `tau_r - a lambda1_ure (tau_r - tau_o)` over `a`.
pub fn a1_star(input: &FusionInput) -> Result<f64> {
    let t = UreTerms::new(input);
    if t.q_d <= 0.0 {
        return Err(coincident_error());
    }
    Ok(1.0 - 2.0 * t.q_d2s / t.q_d / t.trace_sd)
}

fn constant_factors(input: &FusionInput, f: f64, id: EstimatorId) -> ShrinkageOutput {
    ShrinkageOutput::from_factors(input, vec![f; input.k()], id.as_str())
}

/// Common-factor estimator with the unrestricted URE-optimal factor (which may exceed 1).
pub fn kappa1(input: &FusionInput) -> Result<ShrinkageOutput> {
    let lambda = lambda1_ure(input)?;
    Ok(constant_factors(input, lambda, EstimatorId::Kappa1)
        .with_diagnostic("lambda_ure", lambda)
        .with_diagnostic("effective_lambda", lambda))
}

/// Positive-part common-factor estimator: the factor on `tau_o` is `min(lambda1_ure, 1)`.
///
/// Coincident estimates return `tau_o` with factor 1.
pub fn kappa1_plus(input: &FusionInput) -> Result<ShrinkageOutput> {
    let t = UreTerms::new(input);
    let (lambda, f) = if t.q_d <= 0.0 {
        (f64::INFINITY, 1.0)
    } else {
        let lambda = t.trace_sd / t.q_d;
        (lambda, lambda.min(1.0))
    };
    Ok(constant_factors(input, f, EstimatorId::Kappa1Plus)
        .with_diagnostic("lambda_ure", lambda)
        .with_diagnostic("effective_lambda", f))
}

/// Corrected common-factor estimator.
///
/// With `clamp`, the correction is floored at zero and the combined factor
/// `a1* lambda1_ure` is restricted to `[0, 1]`; without it the raw product is used.
pub fn kappa1_star(input: &FusionInput, clamp: bool) -> Result<ShrinkageOutput> {
    let lambda = lambda1_ure(input)?;
    let a = a1_star(input)?;
    let (a_used, f) = if clamp {
        let a_used = a.max(0.0);
        (a_used, (a_used * lambda).clamp(0.0, 1.0))
    } else {
        (a, a * lambda)
    };
    let mut out = constant_factors(input, f, EstimatorId::Kappa1PlusStar)
        .with_diagnostic("lambda_ure", lambda)
        .with_diagnostic("a_star", a)
        .with_diagnostic("effective_lambda", f);
    if clamp && a_used != a {
        out = out.with_diagnostic("a_star_clamped", a_used);
    }
    if !clamp {
        out.method = "kappa1_star".into();
    }
    Ok(out)
}

/// `kappa1_plus_star` as listed in the estimator roster.
pub fn kappa1_plus_star(input: &FusionInput) -> Result<ShrinkageOutput> {
    kappa1_star(input, true)
}

/// Shrinkage factor implied by the corrected positive-part estimator:
/// `1 - (1 - a1* lambda1_ure)_+`, with the correction left unclamped.
/// This is the target of the implied-Gamma search.
pub fn lambda1_plus_corrected(input: &FusionInput) -> Result<f64> {
    let lambda = lambda1_ure(input)?;
    let a = a1_star(input)?;
    Ok(1.0 - (1.0 - a * lambda).max(0.0))
}

/// Minimizer of [`ure_variance_weighted`].
pub fn lambda2_ure(input: &FusionInput) -> Result<f64> {
    let t = UreTerms::new(input);
    if t.q_s2d <= 0.0 {
        return Err(coincident_error());
    }
    Ok(t.trace_s2d / t.q_s2d)
}

/// How the variance-weighted correction `a2*` is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum A2Form {
    /// `1 - 2 (Delta' Sigma_r^4 D^2 Delta) / (Delta' Sigma_r^2 D Delta) / Tr(Sigma_r D)`.
    #[default]
    Printed,
    /// Exact minimizer of the risk estimate over the scaling `a`: same numerator,
    /// trailing factor `1 / Tr(Sigma_r^2 D)`. Coincides with `a1*` when the RCT
    /// variances are equal.
    UreMinimizer,
}

pub fn a2_star(input: &FusionInput, form: A2Form) -> Result<f64> {
    let t = UreTerms::new(input);
    if t.q_s2d <= 0.0 {
        return Err(coincident_error());
    }
    let trailing = match form {
        A2Form::Printed => t.trace_sd,
        A2Form::UreMinimizer => t.trace_s2d,
    };
    Ok(1.0 - 2.0 * t.q_s4d2 / t.q_s2d / trailing)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kappa2Variant {
    Plain,
    Plus,
    PlusStar,
}

/// Variance-weighted estimators. Component `k` moves toward `tau_o` by
/// `f_k = a lambda2_ure sigma_rk^2`; the plus variants clamp each `f_k` into `[0, 1]`.
pub fn kappa2_family(
    input: &FusionInput,
    variant: Kappa2Variant,
    form: A2Form,
) -> Result<ShrinkageOutput> {
    let lambda = lambda2_ure(input)?;
    let (a, a_raw) = match variant {
        Kappa2Variant::PlusStar => {
            let raw = a2_star(input, form)?;
            (raw.max(0.0), Some(raw))
        }
        _ => (1.0, None),
    };
    let factors: Vec<f64> = input
        .sigma_r2
        .iter()
        .map(|s| {
            let f = a * lambda * s;
            match variant {
                Kappa2Variant::Plain => f,
                _ => f.clamp(0.0, 1.0),
            }
        })
        .collect();
    let id = match variant {
        Kappa2Variant::Plain => EstimatorId::Kappa2,
        Kappa2Variant::Plus => EstimatorId::Kappa2Plus,
        Kappa2Variant::PlusStar => EstimatorId::Kappa2PlusStar,
    };
    let mut out = ShrinkageOutput::from_factors(input, factors, id.as_str())
        .with_diagnostic("lambda_ure", lambda);
    if let Some(raw) = a_raw {
        out = out.with_diagnostic("a_star", raw);
        if raw < 0.0 {
            out = out.with_diagnostic("a_star_clamped", 0.0);
        }
    }
    Ok(out)
}

fn gs_default_a(input: &FusionInput, a: Option<f64>) -> Result<f64> {
    match a {
        Some(a) if a.is_finite() && a >= 0.0 => Ok(a),
        Some(a) => Err(Error::InvalidParameter(format!(
            "Green–Strawderman shrinkage constant must be finite and nonnegative, got {a}"
        ))),
        None if input.k() >= 3 => Ok(input.k() as f64 - 2.0),
        None => Err(Error::InvalidParameter(format!(
            "default Green–Strawderman constant a = K - 2 needs K >= 3, got K = {}",
            input.k()
        ))),
    }
}

/// Green–Strawderman `delta_1`:
/// `tau_o + (1 - a / (Delta' Sigma_r^-1 Delta))_+ (tau_r - tau_o)`, default `a = K - 2`.
pub fn gs_delta1(input: &FusionInput, a: Option<f64>) -> Result<ShrinkageOutput> {
    let a = gs_default_a(input, a)?;
    let q = compensated_sum(
        (0..input.k()).map(|k| (input.tau_r[k] - input.tau_o[k]).powi(2) / input.sigma_r2[k]),
    );
    let keep = if q > 0.0 {
        (1.0 - a / q).clamp(0.0, 1.0)
    } else {
        0.0
    };
    Ok(constant_factors(input, 1.0 - keep, EstimatorId::GsDelta1)
        .with_diagnostic("a", a)
        .with_diagnostic("quadratic_form", q))
}

/// Green–Strawderman `delta_2`:
/// `tau_o + (I - a Sigma_r^-1 / (Delta' Sigma_r^-2 Delta))(tau_r - tau_o)` with each
/// diagonal entry of the matrix factor clamped into `[0, 1]`.
pub fn gs_delta2(input: &FusionInput, a: Option<f64>) -> Result<ShrinkageOutput> {
    let a = gs_default_a(input, a)?;
    let q = compensated_sum(
        (0..input.k())
            .map(|k| (input.tau_r[k] - input.tau_o[k]).powi(2) / input.sigma_r2[k].powi(2)),
    );
    let factors = input
        .sigma_r2
        .iter()
        .map(|s| {
            let keep = if q > 0.0 {
                (1.0 - a / (s * q)).clamp(0.0, 1.0)
            } else {
                0.0
            };
            1.0 - keep
        })
        .collect();
    Ok(
        ShrinkageOutput::from_factors(input, factors, EstimatorId::GsDelta2.as_str())
            .with_diagnostic("a", a)
            .with_diagnostic("quadratic_form", q),
    )
}

/// Weighting of the squared-bias term in the oracle denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasWeighting {
    /// `xi' D xi`: the denominator equals `E[Delta' D Delta]` and the result is the
    /// exact risk minimizer over convex combinations.
    #[default]
    Loss,
    /// `xi' D^2 xi` with entries `(d_k / K)^2`.
    Squared,
}

impl BiasWeighting {
    #[inline]
    pub fn bias_weight(self, weights: &WeightedLossSpec, k: usize) -> f64 {
        match self {
            BiasWeighting::Loss => weights.loss_weight(k),
            BiasWeighting::Squared => weights.loss_weight(k).powi(2),
        }
    }
}

/// Oracle weight on `tau_o`:
/// `Tr(Sigma_r D) / (Tr(Sigma_r D) + Tr(Sigma_o D) + bias term)`.
pub fn oracle_lambda(
    sigma_r2: &[f64],
    oracle: &OracleSpec,
    weights: &WeightedLossSpec,
    bias: BiasWeighting,
) -> Result<f64> {
    let k = weights.k();
    for (what, len) in [
        ("sigma_r2", sigma_r2.len()),
        ("oracle xi", oracle.xi.len()),
        ("oracle sigma_o2", oracle.sigma_o2.len()),
    ] {
        if len != k {
            return Err(Error::DimensionMismatch {
                what,
                expected: k,
                found: len,
            });
        }
    }
    let tr = compensated_sum((0..k).map(|i| weights.loss_weight(i) * sigma_r2[i]));
    let to = compensated_sum((0..k).map(|i| weights.loss_weight(i) * oracle.sigma_o2[i]));
    let b = compensated_sum((0..k).map(|i| bias.bias_weight(weights, i) * oracle.xi[i].powi(2)));
    let denom = tr + to + b;
    if !(denom > 0.0) {
        return Err(Error::Degenerate("oracle denominator is zero".into()));
    }
    Ok(tr / denom)
}

/// Oracle convex combination `tau_r - lambda_opt (tau_r - tau_o)`.
pub fn oracle_estimate(
    input: &FusionInput,
    oracle: &OracleSpec,
    bias: BiasWeighting,
) -> Result<ShrinkageOutput> {
    let lambda = oracle_lambda(&input.sigma_r2, oracle, &input.weights, bias)?;
    Ok(constant_factors(input, lambda, EstimatorId::Oracle).with_diagnostic("lambda_opt", lambda))
}

/// Finite-K conditions under which the proposed estimators provably improve on
/// their comparators. Each margin is left side minus right side; a condition
/// holds when its margin is `<= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DominanceReport {
    /// `4 max d_k s_k <= sum d_k s_k`: `kappa1` dominates `tau_r`.
    pub lemma1_holds: bool,
    /// `max d_k^2 s_k^2 <= 1.5 (min d_k s_k)^2`: `kappa1*` is no worse than `kappa1`.
    pub lemma2_holds: bool,
    /// `4 max d_k^2 s_k^2 <= sum d_k^2 s_k^2`: `kappa2` dominates `tau_r`.
    pub lemma3_holds: bool,
    pub margins: [f64; 3],
}

pub fn check_dominance_conditions(
    sigma_r2: &[f64],
    weights: &WeightedLossSpec,
) -> Result<DominanceReport> {
    if sigma_r2.len() != weights.k() {
        return Err(Error::DimensionMismatch {
            what: "sigma_r2",
            expected: weights.k(),
            found: sigma_r2.len(),
        });
    }
    let ds: Vec<f64> = sigma_r2
        .iter()
        .zip(weights.d())
        .map(|(s, d)| s * d)
        .collect();
    let ds2: Vec<f64> = ds.iter().map(|x| x * x).collect();
    let max = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
    let sum_ds = compensated_sum(ds.iter().copied());
    let sum_ds2 = compensated_sum(ds2.iter().copied());

    // Rounding noise around an exact equality counts as equality.
    let snap = |m: f64, scale: f64| if m.abs() <= 1e-12 * scale { 0.0 } else { m };
    let m1 = snap(4.0 * max(&ds) - sum_ds, sum_ds);
    let m2 = snap(max(&ds2) - 1.5 * min(&ds).powi(2), max(&ds2));
    let m3 = snap(4.0 * max(&ds2) - sum_ds2, sum_ds2);
    Ok(DominanceReport {
        lemma1_holds: m1 <= 0.0,
        lemma2_holds: m2 <= 0.0,
        lemma3_holds: m3 <= 0.0,
        margins: [m1, m2, m3],
    })
}

/// Options for [`estimate`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EstimateOptions {
    pub a2_form: A2Form,
    pub bias_weighting: BiasWeighting,
    /// Shrinkage constant for the Green–Strawderman estimators; `K - 2` when unset.
    pub gs_a: Option<f64>,
}

/// Dispatches on an estimator id. `oracle` requires `oracle_spec`.
pub fn estimate(
    id: EstimatorId,
    input: &FusionInput,
    oracle_spec: Option<&OracleSpec>,
    opts: &EstimateOptions,
) -> Result<ShrinkageOutput> {
    match id {
        EstimatorId::TauR => Ok(constant_factors(input, 0.0, id)),
        EstimatorId::TauO => Ok(constant_factors(input, 1.0, id)),
        EstimatorId::Kappa1 => kappa1(input),
        EstimatorId::Kappa1Plus => kappa1_plus(input),
        EstimatorId::Kappa1PlusStar => kappa1_plus_star(input),
        EstimatorId::Kappa2 => kappa2_family(input, Kappa2Variant::Plain, opts.a2_form),
        EstimatorId::Kappa2Plus => kappa2_family(input, Kappa2Variant::Plus, opts.a2_form),
        EstimatorId::Kappa2PlusStar => kappa2_family(input, Kappa2Variant::PlusStar, opts.a2_form),
        EstimatorId::GsDelta1 => gs_delta1(input, opts.gs_a),
        EstimatorId::GsDelta2 => gs_delta2(input, opts.gs_a),
        EstimatorId::Oracle => {
            let spec = oracle_spec.ok_or_else(|| {
                Error::InvalidParameter(
                    "the oracle estimator needs the true bias xi and observational variances"
                        .into(),
                )
            })?;
            oracle_estimate(input, spec, opts.bias_weighting)
        }
    }
}
