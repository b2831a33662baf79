//! Marginal sensitivity analysis for the stratified SIPW estimator.
//!
//! Under the marginal sensitivity model with level `gamma`, the odds of each
//! unit's true treatment probability may differ from the estimated odds by at
//! most a factor `gamma`. For a treated unit this confines the inverse
//! probability weight `1/p` to
//! `[1 + (1/p_hat - 1)/gamma, 1 + gamma (1/p_hat - 1)]`, and analogously for
//! controls with `1/(1 - p)`. The worst-case normalized-weight estimates are
//! linear-fractional programs whose optimum puts every weight at an interval
//! endpoint with a single threshold in the sorted outcomes.
//!
//! The worst-case bias and bootstrap variance of those extrema, plugged into
//! the oracle weight formula, give a confounding-calibrated shrinkage factor
//! `lambda(gamma)`. Searching for the `gamma` whose factor matches the
//! data-driven one yields the implied confounding level.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::causal::{normalized_weighted_mean, StratifiedDataset, Unit};
use crate::error::{Arm, Error, Result};
use crate::fusion::{FusionInput, ShrinkageOutput};
use crate::numeric::{compensated_sum, mean_and_sample_variance};
use crate::rng;
use crate::shrinkage::{lambda1_plus_corrected, BiasWeighting};

const BOOTSTRAP_STREAM: u64 = 0x5E45_B007;
const MAX_EXPANSIONS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensitivityConfig {
    pub gamma: f64,
    pub bootstrap_b: usize,
    pub seed: u64,
    /// Tolerance on `|lambda(gamma) - target|` in the implied-gamma search.
    pub epsilon: f64,
    /// Initial upper end of the implied-gamma search; doubled if needed.
    pub gamma_max: f64,
    pub max_iterations: usize,
    /// Resample treated and control units separately, keeping arm sizes fixed.
    pub arm_stratified: bool,
    pub bias_weighting: BiasWeighting,
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            bootstrap_b: 200,
            seed: 20_200_101,
            epsilon: 1e-4,
            gamma_max: 16.0,
            max_iterations: 100,
            arm_stratified: false,
            bias_weighting: BiasWeighting::Loss,
        }
    }
}

impl SensitivityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 1.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "gamma must be >= 1, got {}",
                self.gamma
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        if !(self.gamma_max > 1.0 && self.gamma_max.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "gamma_max must be > 1, got {}",
                self.gamma_max
            )));
        }
        if self.bootstrap_b < 2 {
            return Err(Error::InvalidParameter(format!(
                "bootstrap_b must be >= 2, got {}",
                self.bootstrap_b
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StratumSensitivity {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub bias_l: f64,
    pub bias_r: f64,
    pub var_l: f64,
    pub var_r: f64,
    /// Larger of the two sides' weighted squared bias plus weighted variance.
    pub combined: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub gamma: f64,
    pub strata: Vec<StratumSensitivity>,
    pub lambda_at_gamma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SearchStatus {
    Converged,
    /// The target lies outside `[lambda(gamma_max), lambda(1)]` even after expanding.
    NotBracketed,
    /// Iteration budget or bracket resolution exhausted before reaching epsilon.
    MaxIterations,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImpliedGammaResult {
    pub gamma_imp: f64,
    pub lambda_target: f64,
    pub lambda_at_gamma: f64,
    pub iterations: usize,
    pub converged: bool,
    pub status: SearchStatus,
}

/// Outcomes and estimated propensities of one arm.
#[derive(Debug, Clone, Default)]
struct ArmData {
    y: Vec<f64>,
    p: Vec<f64>,
}

impl ArmData {
    fn len(&self) -> usize {
        self.y.len()
    }

    fn weight_bounds(&self, arm: Arm, gamma: f64) -> (Vec<f64>, Vec<f64>) {
        let base = |p: f64| match arm {
            Arm::Treated => 1.0 / p,
            Arm::Control => 1.0 / (1.0 - p),
        };
        if gamma == 1.0 {
            let w: Vec<f64> = self.p.iter().map(|&p| base(p)).collect();
            return (w.clone(), w);
        }
        self.p
            .iter()
            .map(|&p| {
                let odds = base(p) - 1.0;
                (1.0 + odds / gamma, 1.0 + gamma * odds)
            })
            .unzip()
    }

    fn point(&self, arm: Arm) -> f64 {
        let (w, _) = self.weight_bounds(arm, 1.0);
        normalized_weighted_mean(&self.y, &w)
    }

    /// (min, max) of the normalized-weight mean over weights in `[lo, hi]`.
    fn extrema(&self, lo: &[f64], hi: &[f64]) -> (f64, f64) {
        let n = self.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| self.y[a].total_cmp(&self.y[b]));

        // Max: units below the cut take `lo`, the rest `hi`. Min: the reverse.
        let best_cut = |below: &[f64], above: &[f64], maximize: bool| -> usize {
            let mut num_above: f64 = order.iter().map(|&i| above[i] * self.y[i]).sum();
            let mut den_above: f64 = order.iter().map(|&i| above[i]).sum();
            let (mut num_below, mut den_below) = (0.0, 0.0);
            let mut best = (num_above / den_above, 0usize);
            for (c, &i) in order.iter().enumerate() {
                num_below += below[i] * self.y[i];
                den_below += below[i];
                num_above -= above[i] * self.y[i];
                den_above -= above[i];
                let v = (num_below + num_above) / (den_below + den_above);
                if (maximize && v > best.0) || (!maximize && v < best.0) {
                    best = (v, c + 1);
                }
            }
            best.1
        };
        let evaluate = |cut: usize, below: &[f64], above: &[f64]| -> f64 {
            let mut w = vec![0.0; n];
            for (rank, &i) in order.iter().enumerate() {
                w[i] = if rank < cut { below[i] } else { above[i] };
            }
            normalized_weighted_mean(&self.y, &w)
        };
        let max_cut = best_cut(lo, hi, true);
        let min_cut = best_cut(hi, lo, false);
        (evaluate(min_cut, hi, lo), evaluate(max_cut, lo, hi))
    }
}

#[derive(Debug, Clone, Default)]
struct StratumData {
    treated: ArmData,
    control: ArmData,
}

impl StratumData {
    fn from_units<'a>(units: impl IntoIterator<Item = &'a Unit>) -> Result<Self> {
        let mut s = StratumData::default();
        for (index, u) in units.into_iter().enumerate() {
            let p = u.p_hat.ok_or(Error::MissingPropensity(index))?;
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::InvalidPropensity { index, value: p });
            }
            let arm = if u.treated {
                &mut s.treated
            } else {
                &mut s.control
            };
            arm.y.push(u.y);
            arm.p.push(p);
        }
        Ok(s)
    }

    fn check_arms(&self, stratum: usize, required: usize) -> Result<()> {
        for (arm, data) in [(Arm::Treated, &self.treated), (Arm::Control, &self.control)] {
            match data.len() {
                0 => return Err(Error::EmptyArm { stratum, arm }),
                n if n < required => {
                    return Err(Error::ArmTooSmall {
                        stratum,
                        arm,
                        size: n,
                        required,
                    })
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn point(&self) -> f64 {
        self.treated.point(Arm::Treated) - self.control.point(Arm::Control)
    }

    fn extrema(&self, gamma: f64) -> (f64, f64) {
        let (tlo, thi) = self.treated.weight_bounds(Arm::Treated, gamma);
        let (clo, chi) = self.control.weight_bounds(Arm::Control, gamma);
        let (t_min, t_max) = self.treated.extrema(&tlo, &thi);
        let (c_min, c_max) = self.control.extrema(&clo, &chi);
        let point = self.point();
        // The point estimate is always feasible; clamping only absorbs rounding.
        ((t_min - c_max).min(point), (t_max - c_min).max(point))
    }

    /// Bootstrap resamples as (treated, control) index lists. Depends only on
    /// the seed, the stratum index, and the arm sizes, so every gamma sees the
    /// same replicates.
    fn resamples(
        &self,
        b: usize,
        seed: u64,
        stratum: usize,
        arm_stratified: bool,
    ) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
        let nt = self.treated.len();
        let nc = self.control.len();
        let n = nt + nc;
        let cap = 10 * b;
        let mut attempts = 0usize;
        let mut out = Vec::with_capacity(b);
        for rep in 0..b {
            let mut rng = rng::stream(seed, &[BOOTSTRAP_STREAM, stratum as u64, rep as u64]);
            loop {
                attempts += 1;
                if attempts > cap {
                    return Err(Error::BootstrapExhausted(stratum));
                }
                if arm_stratified {
                    let t = (0..nt).map(|_| rng.random_range(0..nt)).collect();
                    let c = (0..nc).map(|_| rng.random_range(0..nc)).collect();
                    out.push((t, c));
                    break;
                }
                let (mut t, mut c) = (Vec::new(), Vec::new());
                for _ in 0..n {
                    let j = rng.random_range(0..n);
                    if j < nt {
                        t.push(j);
                    } else {
                        c.push(j - nt);
                    }
                }
                if !t.is_empty() && !c.is_empty() {
                    out.push((t, c));
                    break;
                }
            }
        }
        Ok(out)
    }

    fn subsample(&self, t: &[usize], c: &[usize]) -> StratumData {
        let pick = |arm: &ArmData, idx: &[usize]| ArmData {
            y: idx.iter().map(|&i| arm.y[i]).collect(),
            p: idx.iter().map(|&i| arm.p[i]).collect(),
        };
        StratumData {
            treated: pick(&self.treated, t),
            control: pick(&self.control, c),
        }
    }
}

fn stratum_data(units: &[Unit], stratum: usize) -> Result<StratumData> {
    let s = StratumData::from_units(units)?;
    s.check_arms(stratum, 1)?;
    Ok(s)
}

/// Smallest and largest SIPW contrast in one stratum under sensitivity level `gamma`.
pub fn sipw_extrema(units: &[Unit], gamma: f64) -> Result<(f64, f64)> {
    if !(gamma >= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "gamma must be >= 1, got {gamma}"
        )));
    }
    Ok(stratum_data(units, 0)?.extrema(gamma))
}

/// Sample variances of the lower and upper extrema across `b` bootstrap
/// resamples of the stratum's units.
pub fn bootstrap_extrema_variance(
    units: &[Unit],
    gamma: f64,
    b: usize,
    seed: u64,
    stratum: usize,
    arm_stratified: bool,
) -> Result<(f64, f64)> {
    if !(gamma >= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "gamma must be >= 1, got {gamma}"
        )));
    }
    if b < 2 {
        return Err(Error::InvalidParameter(format!(
            "bootstrap needs B >= 2, got {b}"
        )));
    }
    let data = StratumData::from_units(units)?;
    data.check_arms(stratum, 2)?;
    let resamples = data.resamples(b, seed, stratum, arm_stratified)?;
    Ok(bootstrap_variances(&data, &resamples, gamma))
}

fn bootstrap_variances(
    data: &StratumData,
    resamples: &[(Vec<usize>, Vec<usize>)],
    gamma: f64,
) -> (f64, f64) {
    let (lows, highs): (Vec<f64>, Vec<f64>) = resamples
        .iter()
        .map(|(t, c)| data.subsample(t, c).extrema(gamma))
        .unzip();
    (
        mean_and_sample_variance(&lows).1,
        mean_and_sample_variance(&highs).1,
    )
}

/// Per-stratum data with bootstrap resamples fixed, so that `lambda(gamma)`
/// can be evaluated repeatedly during a search.
struct SensitivityModel<'a> {
    fusion: &'a FusionInput,
    config: SensitivityConfig,
    strata: Vec<(StratumData, Vec<(Vec<usize>, Vec<usize>)>)>,
}

impl<'a> SensitivityModel<'a> {
    fn new(
        obs: &StratifiedDataset,
        fusion: &'a FusionInput,
        config: &SensitivityConfig,
    ) -> Result<Self> {
        config.validate()?;
        if obs.k != fusion.k() {
            return Err(Error::DimensionMismatch {
                what: "observational stratum count",
                expected: fusion.k(),
                found: obs.k,
            });
        }
        let mut by_stratum: Vec<Vec<Unit>> = vec![Vec::new(); obs.k];
        for (index, u) in obs.units.iter().enumerate() {
            if u.p_hat.is_none() {
                return Err(Error::MissingPropensity(index));
            }
            by_stratum[u.stratum].push(u.clone());
        }
        let strata = by_stratum
            .into_par_iter()
            .enumerate()
            .map(|(k, units)| {
                let data = StratumData::from_units(&units)?;
                data.check_arms(k, 2)?;
                let res =
                    data.resamples(config.bootstrap_b, config.seed, k, config.arm_stratified)?;
                Ok((data, res))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            fusion,
            config: *config,
            strata,
        })
    }

    fn report(&self, gamma: f64) -> SensitivityReport {
        let w = &self.fusion.weights;
        let bw = self.config.bias_weighting;
        let strata: Vec<StratumSensitivity> = self
            .strata
            .par_iter()
            .enumerate()
            .map(|(k, (data, res))| {
                let point = data.point();
                let (lower, upper) = data.extrema(gamma);
                let (var_l, var_r) = bootstrap_variances(data, res, gamma);
                let bias_l = point - lower;
                let bias_r = upper - point;
                let side = |bias: f64, var: f64| {
                    bw.bias_weight(w, k) * bias * bias + w.loss_weight(k) * var
                };
                StratumSensitivity {
                    point,
                    lower,
                    upper,
                    bias_l,
                    bias_r,
                    var_l,
                    var_r,
                    combined: side(bias_l, var_l).max(side(bias_r, var_r)),
                }
            })
            .collect();
        let tr = w.weighted_sum(|k| self.fusion.sigma_r2[k]);
        let extra = compensated_sum(strata.iter().map(|s| s.combined));
        SensitivityReport {
            gamma,
            strata,
            lambda_at_gamma: tr / (tr + extra),
        }
    }
}

/// Worst-case report at `config.gamma`, including `lambda(gamma)`.
pub fn lambda_of_gamma(
    obs: &StratifiedDataset,
    fusion: &FusionInput,
    config: &SensitivityConfig,
) -> Result<SensitivityReport> {
    Ok(SensitivityModel::new(obs, fusion, config)?.report(config.gamma))
}

/// `lambda(gamma)` over a grid, sharing one set of bootstrap resamples.
pub fn lambda_curve(
    obs: &StratifiedDataset,
    fusion: &FusionInput,
    config: &SensitivityConfig,
    gammas: &[f64],
) -> Result<Vec<f64>> {
    let model = SensitivityModel::new(obs, fusion, config)?;
    gammas
        .iter()
        .map(|&g| {
            if !(g >= 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "gamma must be >= 1, got {g}"
                )));
            }
            Ok(model.report(g).lambda_at_gamma)
        })
        .collect()
}

/// Bisection for the `gamma` at which `lambda(gamma)` equals `target`.
pub fn implied_gamma_for_target(
    obs: &StratifiedDataset,
    fusion: &FusionInput,
    config: &SensitivityConfig,
    target: f64,
) -> Result<ImpliedGammaResult> {
    let model = SensitivityModel::new(obs, fusion, config)?;
    let lambda = |g: f64| model.report(g).lambda_at_gamma;
    let eps = config.epsilon;
    let result = |gamma_imp, at, iterations, status| ImpliedGammaResult {
        gamma_imp,
        lambda_target: target,
        lambda_at_gamma: at,
        iterations,
        converged: status == SearchStatus::Converged,
        status,
    };

    let at_one = lambda(1.0);
    if (at_one - target).abs() < eps {
        return Ok(result(1.0, at_one, 0, SearchStatus::Converged));
    }
    if !(target < at_one) {
        return Ok(result(1.0, at_one, 0, SearchStatus::NotBracketed));
    }
    let mut hi = config.gamma_max;
    let mut at_hi = lambda(hi);
    let mut expansions = 0;
    while at_hi > target && (at_hi - target).abs() >= eps && expansions < MAX_EXPANSIONS {
        hi *= 2.0;
        at_hi = lambda(hi);
        expansions += 1;
    }
    if (at_hi - target).abs() < eps {
        return Ok(result(hi, at_hi, 0, SearchStatus::Converged));
    }
    if at_hi > target {
        return Ok(result(hi, at_hi, 0, SearchStatus::NotBracketed));
    }

    let mut lo = 1.0;
    let mut best = (hi, at_hi);
    for it in 1..=config.max_iterations {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            return Ok(result(best.0, best.1, it - 1, SearchStatus::MaxIterations));
        }
        let at_mid = lambda(mid);
        if (at_mid - target).abs() < (best.1 - target).abs() {
            best = (mid, at_mid);
        }
        if (at_mid - target).abs() < eps {
            return Ok(result(mid, at_mid, it, SearchStatus::Converged));
        }
        if at_mid > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(result(
        best.0,
        best.1,
        config.max_iterations,
        SearchStatus::MaxIterations,
    ))
}

/// Implied confounding level of the corrected positive-part common-factor
/// estimator: the search target is `1 - (1 - a1* lambda1_ure)_+`.
pub fn implied_gamma(
    obs: &StratifiedDataset,
    fusion: &FusionInput,
    config: &SensitivityConfig,
) -> Result<ImpliedGammaResult> {
    let target = lambda1_plus_corrected(fusion)?;
    implied_gamma_for_target(obs, fusion, config, target)
}

/// Which estimate `lambda(gamma)` weights in [`gamma_blend`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlendConvention {
    /// `(1 - lambda) tau_r + lambda tau_o`: `lambda(gamma)` is the weight on the
    /// observational estimate, as in the oracle formula it is derived from, so
    /// larger `gamma` leans on the RCT.
    #[default]
    ObservationalWeight,
    /// `lambda tau_r + (1 - lambda) tau_o`.
    RctWeight,
}

/// Convex combination of the two estimates with the sensitivity-derived factor.
pub fn gamma_blend(
    gamma: f64,
    obs: &StratifiedDataset,
    fusion: &FusionInput,
    config: &SensitivityConfig,
    convention: BlendConvention,
) -> Result<ShrinkageOutput> {
    let config = SensitivityConfig { gamma, ..*config };
    let report = lambda_of_gamma(obs, fusion, &config)?;
    Ok(
        blend_with_lambda(fusion, report.lambda_at_gamma, convention)
            .with_diagnostic("gamma", gamma),
    )
}

/// The blend for a given `lambda(gamma)`.
pub fn blend_with_lambda(
    fusion: &FusionInput,
    lambda: f64,
    convention: BlendConvention,
) -> ShrinkageOutput {
    let f = match convention {
        BlendConvention::ObservationalWeight => lambda,
        BlendConvention::RctWeight => 1.0 - lambda,
    };
    ShrinkageOutput::from_factors(fusion, vec![f; fusion.k()], "gamma_blend")
        .with_diagnostic("lambda_at_gamma", lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::causal::{sipw, StudyRole};
    use crate::fusion::WeightedLossSpec;
    use rand_distr::{Distribution, StandardNormal};

    fn unit(y: f64, treated: bool, p: f64) -> Unit {
        Unit {
            y,
            treated,
            stratum: 0,
            x: vec![],
            p_hat: Some(p),
        }
    }

    fn random_units(seed: u64, nt: usize, nc: usize) -> Vec<Unit> {
        let mut r = rng::stream(seed, &[]);
        (0..nt + nc)
            .map(|i| {
                unit(
                    StandardNormal.sample(&mut r),
                    i < nt,
                    r.random_range(0.05..0.95),
                )
            })
            .collect()
    }

    /// Exhaustive search over every endpoint assignment of every unit.
    fn brute_force(units: &[Unit], gamma: f64) -> (f64, f64) {
        let n = units.len();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for mask in 0u32..(1 << n) {
            let (mut tn, mut td, mut cn, mut cd) = (0.0, 0.0, 0.0, 0.0);
            for (i, u) in units.iter().enumerate() {
                let p = u.p_hat.unwrap();
                let odds = if u.treated {
                    1.0 / p - 1.0
                } else {
                    1.0 / (1.0 - p) - 1.0
                };
                let w = if mask >> i & 1 == 1 {
                    1.0 + gamma * odds
                } else {
                    1.0 + odds / gamma
                };
                if u.treated {
                    tn += w * u.y;
                    td += w;
                } else {
                    cn += w * u.y;
                    cd += w;
                }
            }
            let v = tn / td - cn / cd;
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    #[test]
    fn gamma_one_collapses_to_point() {
        let units = random_units(1, 7, 9);
        let (lo, hi) = sipw_extrema(&units, 1.0).unwrap();
        let point =
            sipw(&StratifiedDataset::new(units, 1, StudyRole::Observational).unwrap()).unwrap()[0];
        assert_eq!(lo, hi);
        assert!((lo - point).abs() < 1e-14);
    }

    #[test]
    fn matches_brute_force_on_small_instances() {
        for seed in 0..60u64 {
            let nt = 1 + (seed as usize % 6);
            let nc = 1 + (seed as usize / 6 % 6);
            let units = random_units(seed, nt, nc);
            let got = sipw_extrema(&units, 2.0).unwrap();
            let want = brute_force(&units, 2.0);
            assert!(
                (got.0 - want.0).abs() <= 1e-12 * (1.0 + want.0.abs()),
                "{seed}: {got:?} {want:?}"
            );
            assert!(
                (got.1 - want.1).abs() <= 1e-12 * (1.0 + want.1.abs()),
                "{seed}: {got:?} {want:?}"
            );
        }
    }

    #[test]
    fn intervals_nest_and_approach_outcome_range() {
        let units = random_units(5, 20, 25);
        let mut prev = sipw_extrema(&units, 1.0).unwrap();
        for g in [1.1, 1.5, 2.0, 4.0, 10.0, 100.0, 1e6] {
            let cur = sipw_extrema(&units, g).unwrap();
            assert!(cur.0 <= prev.0 + 1e-14 && cur.1 >= prev.1 - 1e-14);
            prev = cur;
        }
        let ty: Vec<f64> = units.iter().filter(|u| u.treated).map(|u| u.y).collect();
        let cy: Vec<f64> = units.iter().filter(|u| !u.treated).map(|u| u.y).collect();
        let max = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
        assert!((prev.1 - (max(&ty) - min(&cy))).abs() < 1e-3);
        assert!((prev.0 - (min(&ty) - max(&cy))).abs() < 1e-3);
    }

    #[test]
    fn invalid_gamma_and_empty_arm() {
        let units = random_units(2, 3, 3);
        assert!(sipw_extrema(&units, 0.5).is_err());
        let treated_only: Vec<Unit> = units.iter().filter(|u| u.treated).cloned().collect();
        assert!(matches!(
            sipw_extrema(&treated_only, 2.0),
            Err(Error::EmptyArm {
                arm: Arm::Control,
                ..
            })
        ));
    }

    #[test]
    fn bootstrap_constant_outcomes_have_zero_variance() {
        let units: Vec<Unit> = (0..20)
            .map(|i| unit(3.0, i % 2 == 0, 0.2 + 0.03 * i as f64))
            .collect();
        let (vl, vr) = bootstrap_extrema_variance(&units, 2.0, 50, 1, 0, false).unwrap();
        assert!(vl < 1e-28 && vr < 1e-28, "{vl} {vr}");
    }

    #[test]
    fn bootstrap_is_deterministic_given_seed() {
        let units = random_units(3, 15, 15);
        let a = bootstrap_extrema_variance(&units, 1.5, 100, 42, 0, false).unwrap();
        let b = bootstrap_extrema_variance(&units, 1.5, 100, 42, 0, false).unwrap();
        let c = bootstrap_extrema_variance(&units, 1.5, 100, 43, 0, false).unwrap();
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(a.1.to_bits(), b.1.to_bits());
        assert_ne!(a, c);
    }

    #[test]
    fn bootstrap_gives_up_on_tiny_strata() {
        // With one treated unit among many controls, most resamples lose the treated arm.
        let mut units: Vec<Unit> = (0..60).map(|_| unit(1.0, false, 0.5)).collect();
        units.push(unit(2.0, true, 0.5));
        units.push(unit(2.5, true, 0.5));
        let r = bootstrap_extrema_variance(&units[..61], 1.0, 10, 1, 0, false);
        assert!(matches!(r, Err(Error::ArmTooSmall { .. })));
        let r = bootstrap_extrema_variance(&units, 1.0, 10, 1, 3, false);
        // Two treated out of 62: P(no treated) = (60/62)^62 ≈ 0.13, so this succeeds.
        assert!(r.is_ok());
    }

    #[test]
    fn blend_examples() {
        let fusion = FusionInput::new(
            vec![1.0, 1.0],
            vec![3.0, 3.0],
            vec![1.0, 1.0],
            None,
            WeightedLossSpec::uniform(2).unwrap(),
        )
        .unwrap();
        assert_eq!(
            blend_with_lambda(&fusion, 0.5, BlendConvention::ObservationalWeight).estimate,
            vec![2.0, 2.0]
        );
        assert_eq!(
            blend_with_lambda(&fusion, 0.5, BlendConvention::RctWeight).estimate,
            vec![2.0, 2.0]
        );
        assert_eq!(
            blend_with_lambda(&fusion, 1.0, BlendConvention::RctWeight).estimate,
            fusion.tau_r
        );
        assert_eq!(
            blend_with_lambda(&fusion, 0.0, BlendConvention::RctWeight).estimate,
            fusion.tau_o
        );
        assert_eq!(
            blend_with_lambda(&fusion, 1.0, BlendConvention::ObservationalWeight).estimate,
            fusion.tau_o
        );
        assert_eq!(
            blend_with_lambda(&fusion, 0.0, BlendConvention::ObservationalWeight).estimate,
            fusion.tau_r
        );
    }
}
