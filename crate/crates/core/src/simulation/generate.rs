//! Synthetic populations: covariates, an unmeasured confounder, potential
//! outcomes, strata on the second covariate, and treatment mechanisms.

use nalgebra::Matrix3;
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::causal::{StratifiedDataset, StudyRole, Unit};
use crate::error::{Arm, Error, Result};
use crate::fusion::WeightedLossSpec;
use crate::numeric::{compensated_sum, mean_and_sample_variance, population_covariance};

use super::{SimConfig, StrataScheme};

pub const COVARIATES: usize = 3;
const COVARIANCE_ATTEMPTS: usize = 100;
const MIN_EIGENVALUE: f64 = 1e-8;
const ETA_SD: f64 = 0.5;

/// Unit-variance covariance whose off-diagonals are 0 with probability 1/2
/// and +0.1 or -0.1 with probability 1/4 each, redrawn until positive definite.
pub fn sample_covariance<R: Rng + ?Sized>(rng: &mut R) -> Result<Matrix3<f64>> {
    for _ in 0..COVARIANCE_ATTEMPTS {
        let mut m = Matrix3::identity();
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            let u: f64 = rng.random();
            let v = if u < 0.5 {
                0.0
            } else if u < 0.75 {
                0.1
            } else {
                -0.1
            };
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
        if m.symmetric_eigenvalues().min() > MIN_EIGENVALUE {
            return Ok(m);
        }
    }
    Err(Error::Degenerate(format!(
        "no positive definite covariance after {COVARIANCE_ATTEMPTS} draws"
    )))
}

/// Target stratum probability masses on the standard normal scale.
pub fn stratum_masses(k: usize, scheme: StrataScheme) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::InvalidParameter(
            "stratum count must be positive".into(),
        ));
    }
    match scheme {
        StrataScheme::Similar => Ok(vec![1.0 / k as f64; k]),
        StrataScheme::Variable => {
            if k % 2 != 0 {
                return Err(Error::InvalidParameter(format!(
                    "variable strata need an even stratum count, got {k}"
                )));
            }
            let kf = k as f64;
            Ok((0..k)
                .map(|i| {
                    if i < k / 2 {
                        2.0 / (3.0 * kf)
                    } else {
                        4.0 / (3.0 * kf)
                    }
                })
                .collect())
        }
    }
}

/// `K + 1` cut points from `-inf` to `+inf` at standard normal quantiles of
/// the cumulative masses.
pub fn stratum_boundaries(k: usize, scheme: StrataScheme) -> Result<Vec<f64>> {
    let masses = stratum_masses(k, scheme)?;
    let normal = Normal::standard();
    let mut out = Vec::with_capacity(k + 1);
    out.push(f64::NEG_INFINITY);
    let mut cum = 0.0;
    for m in &masses[..k - 1] {
        cum += m;
        out.push(normal.inverse_cdf(cum));
    }
    out.push(f64::INFINITY);
    Ok(out)
}

/// Index of the stratum whose half-open interval `[b_k, b_{k+1})` holds `v`.
pub fn stratum_of(v: f64, boundaries: &[f64]) -> usize {
    let interior = &boundaries[1..boundaries.len() - 1];
    interior.partition_point(|&b| b <= v)
}

/// A finite population with both potential outcomes and true propensities.
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub x: Vec<[f64; COVARIATES]>,
    pub u: Vec<f64>,
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
    /// Observational treatment probabilities; 1/2 for the RCT.
    pub p: Vec<f64>,
    pub stratum: Vec<usize>,
    pub k: usize,
}

impl Population {
    pub fn len(&self) -> usize {
        self.y0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y0.is_empty()
    }

    pub fn stratum_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.k];
        for &s in &self.stratum {
            c[s] += 1;
        }
        c
    }

    pub fn stratum_members(&self) -> Vec<Vec<usize>> {
        let mut m = vec![Vec::new(); self.k];
        for (i, &s) in self.stratum.iter().enumerate() {
            m[s].push(i);
        }
        m
    }

    /// Frequencies `d_k = n_k / n`.
    pub fn weights(&self) -> Result<WeightedLossSpec> {
        let counts = self.stratum_counts();
        if let Some(k) = counts.iter().position(|&c| c == 0) {
            return Err(Error::EmptyStratum(k));
        }
        let n = self.len() as f64;
        WeightedLossSpec::new(counts.iter().map(|&c| c as f64 / n).collect())
    }

    /// Observed data under an assignment. Covariates are carried only when
    /// `with_covariates` is set.
    pub fn observe(
        &self,
        treated: &[bool],
        role: StudyRole,
        p_hat: Option<&[f64]>,
        with_covariates: bool,
    ) -> Result<StratifiedDataset> {
        if treated.len() != self.len() {
            return Err(Error::DimensionMismatch {
                what: "assignment vector",
                expected: self.len(),
                found: treated.len(),
            });
        }
        let units = (0..self.len())
            .map(|i| Unit {
                y: if treated[i] { self.y1[i] } else { self.y0[i] },
                treated: treated[i],
                stratum: self.stratum[i],
                x: if with_covariates {
                    self.x[i].to_vec()
                } else {
                    Vec::new()
                },
                p_hat: p_hat.map(|p| p[i]),
            })
            .collect();
        StratifiedDataset::new(units, self.k, role)
    }

    pub fn covariate_rows(&self) -> Vec<&[f64]> {
        self.x.iter().map(|r| r.as_slice()).collect()
    }
}

fn draw_units<R: Rng + ?Sized>(
    n: usize,
    mean: &[f64; COVARIATES],
    chol: &Matrix3<f64>,
    boundaries: &[f64],
    rng: &mut R,
) -> Population {
    let k = boundaries.len() - 1;
    let mut pop = Population {
        x: Vec::with_capacity(n),
        u: Vec::with_capacity(n),
        y0: Vec::with_capacity(n),
        y1: Vec::with_capacity(n),
        p: Vec::with_capacity(n),
        stratum: Vec::with_capacity(n),
        k,
    };
    for _ in 0..n {
        let z: [f64; COVARIATES] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let x: [f64; COVARIATES] =
            std::array::from_fn(|r| mean[r] + (0..=r).map(|c| chol[(r, c)] * z[c]).sum::<f64>());
        let sum_x: f64 = x.iter().sum();
        let eta: f64 = StandardNormal.sample(rng);
        let u = sum_x / 3.0 + ETA_SD * eta;
        let eps: f64 = StandardNormal.sample(rng);
        pop.y0.push(sum_x + u + eps);
        pop.u.push(u);
        pop.stratum.push(stratum_of(x[1], boundaries));
        pop.x.push(x);
    }
    pop
}

/// Direction in which the unmeasured confounder enters treatment selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfounderSelection {
    /// `p = 1 / (1 + exp(-(gamma' x + u)))`: `u` raises both the outcome and
    /// the treatment probability.
    #[default]
    Reinforcing,
    /// `p = 1 / (1 + exp(-gamma' x + u))`: `u` raises the outcome but lowers
    /// the treatment probability, partly offsetting the measured confounding.
    Opposing,
}

impl ConfounderSelection {
    fn sign(self) -> f64 {
        match self {
            ConfounderSelection::Reinforcing => 1.0,
            ConfounderSelection::Opposing => -1.0,
        }
    }
}

/// Logistic selection with `gamma = 1`, scaled by `strength`.
pub fn true_propensity(
    x: &[f64; COVARIATES],
    u: f64,
    strength: f64,
    selection: ConfounderSelection,
) -> f64 {
    let eta = strength * (x.iter().sum::<f64>() + selection.sign() * u);
    1.0 / (1.0 + (-eta).exp())
}

/// How the outcome standard deviation in the effect size is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CohensDenominator {
    /// Sample standard deviation of `Y(0)` over all observational units.
    #[default]
    ControlSd,
    /// `sqrt((var Y(0) + var Y(1)) / 2)` over all observational units.
    PooledSd,
}

impl CohensDenominator {
    pub fn describe(self) -> &'static str {
        match self {
            CohensDenominator::ControlSd => {
                "|sum_k d_k tau_k| / sd(Y(0)) over observational units, sd with n-1"
            }
            CohensDenominator::PooledSd => {
                "|sum_k d_k tau_k| / sqrt((var Y(0) + var Y(1)) / 2) over observational units, var with n-1"
            }
        }
    }
}

fn weighted_mean_effect(effects: &[f64], weights: &WeightedLossSpec) -> Result<f64> {
    if effects.len() != weights.k() {
        return Err(Error::DimensionMismatch {
            what: "effects",
            expected: weights.k(),
            found: effects.len(),
        });
    }
    Ok(compensated_sum(
        effects.iter().zip(weights.d()).map(|(t, d)| t * d),
    ))
}

/// Effect size `|sum d_k tau_k| / sd(y0)`.
pub fn cohens_d(effects: &[f64], y0: &[f64], weights: &WeightedLossSpec) -> Result<f64> {
    let m = weighted_mean_effect(effects, weights)?;
    let sd = mean_and_sample_variance(y0).1.sqrt();
    Ok(m.abs() / sd)
}

/// Multiplies the effects by the positive `c` that puts
/// `|sum d_k c tau_k| / sd(y0)` at `target`. Returns the scaled effects and `c`.
pub fn scale_to_cohens_d(
    effects: &[f64],
    y0: &[f64],
    weights: &WeightedLossSpec,
    target: f64,
) -> Result<(Vec<f64>, f64)> {
    check_target(target)?;
    let m = weighted_mean_effect(effects, weights)?;
    let sd = mean_and_sample_variance(y0).1.sqrt();
    if !(sd > 0.0) {
        return Err(Error::Degenerate(
            "control outcomes have zero dispersion".into(),
        ));
    }
    if m == 0.0 {
        return Err(Error::Degenerate(
            "weighted mean effect is zero; cannot scale".into(),
        ));
    }
    let c = target * sd / m.abs();
    Ok((effects.iter().map(|t| c * t).collect(), c))
}

/// As [`scale_to_cohens_d`] with the pooled denominator. The effects enter
/// `Y(1)`, so `c` solves a quadratic.
pub fn scale_to_cohens_d_pooled(
    effects: &[f64],
    y0: &[f64],
    strata: &[usize],
    weights: &WeightedLossSpec,
    target: f64,
) -> Result<(Vec<f64>, f64)> {
    check_target(target)?;
    let m = weighted_mean_effect(effects, weights)?;
    let t: Vec<f64> = strata.iter().map(|&s| effects[s]).collect();
    let v0 = mean_and_sample_variance(y0).1;
    let vt = mean_and_sample_variance(&t).1;
    let n = y0.len() as f64;
    let cov = population_covariance(y0, &t) * n / (n - 1.0);
    if !(v0 > 0.0) {
        return Err(Error::Degenerate(
            "control outcomes have zero dispersion".into(),
        ));
    }
    // c^2 m^2 = T^2 (v0 + c cov + c^2 vt / 2)
    let t2 = target * target;
    let a = m * m - t2 * vt / 2.0;
    let b = -t2 * cov;
    let c0 = -t2 * v0;
    if !(a > 0.0) {
        return Err(Error::Degenerate(format!(
            "pooled effect size cannot reach {target}: effect heterogeneity dominates"
        )));
    }
    let c = (-b + (b * b - 4.0 * a * c0).sqrt()) / (2.0 * a);
    Ok((effects.iter().map(|e| c * e).collect(), c))
}

fn check_target(target: f64) -> Result<()> {
    if !(target > 0.0 && target.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "Cohen's d target must be positive, got {target}"
        )));
    }
    Ok(())
}

/// Ground truth for one population draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTruth {
    pub tau: Vec<f64>,
    /// `K + 1` cut points; the ends are infinite and serialize as `null`.
    pub boundaries: Vec<f64>,
    pub d: Vec<f64>,
    pub effect_scale: f64,
    pub mu_o: [f64; COVARIATES],
    pub covariance: [[f64; COVARIATES]; COVARIATES],
    /// Linearized bias of the unadjusted observational estimate.
    pub delta_method_xi: Vec<f64>,
    /// Exact design variance of the RCT difference in means.
    pub sigma_r2_exact: Vec<f64>,
    /// Monte Carlo bias and variance of the observational estimate.
    pub xi_empirical: Vec<f64>,
    pub sigma_o2_empirical: Vec<f64>,
    pub lambda_opt: f64,
}

/// Draws the observational and RCT populations of one outer replicate.
/// The empirical oracle fields of the truth are left empty.
pub fn generate_populations<R: Rng + ?Sized>(
    config: &SimConfig,
    rng: &mut R,
) -> Result<(Population, Population, SimTruth)> {
    config.validate()?;
    let k = config.k;
    let boundaries = stratum_boundaries(k, config.strata_scheme)?;
    let sigma = sample_covariance(rng)?;
    let chol = sigma
        .cholesky()
        .ok_or_else(|| Error::Degenerate("covariance is not positive definite".into()))?
        .l();
    let mu_o: [f64; COVARIATES] = if config.covariate_shift {
        std::array::from_fn(|_| rng.random_range(-0.5..0.5))
    } else {
        [0.0; COVARIATES]
    };
    let mut obs = draw_units(config.n_o, &mu_o, &chol, &boundaries, rng);
    let mut rct = draw_units(config.n_r, &[0.0; COVARIATES], &chol, &boundaries, rng);

    let weights = obs.weights()?;
    for (s, &n) in rct.stratum_counts().iter().enumerate() {
        if n == 0 {
            return Err(Error::EmptyStratum(s));
        }
        if n / 2 < 2 {
            return Err(Error::ArmTooSmall {
                stratum: s,
                arm: Arm::Treated,
                size: n / 2,
                required: 2,
            });
        }
    }

    let raw: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
    let (tau, effect_scale) = match config.cohens_d_denominator {
        CohensDenominator::ControlSd => {
            scale_to_cohens_d(&raw, &obs.y0, &weights, config.cohens_d)?
        }
        CohensDenominator::PooledSd => {
            scale_to_cohens_d_pooled(&raw, &obs.y0, &obs.stratum, &weights, config.cohens_d)?
        }
    };
    for pop in [&mut obs, &mut rct] {
        pop.y1 = pop
            .y0
            .iter()
            .zip(&pop.stratum)
            .map(|(y, &s)| y + tau[s])
            .collect();
    }
    obs.p = obs
        .x
        .iter()
        .zip(&obs.u)
        .map(|(x, &u)| {
            true_propensity(x, u, config.selection_strength, config.confounder_selection)
        })
        .collect();
    rct.p = vec![0.5; rct.len()];

    let truth = SimTruth {
        delta_method_xi: delta_method_bias(&obs),
        sigma_r2_exact: rct_design_variance(&rct),
        tau,
        boundaries,
        d: weights.d().to_vec(),
        effect_scale,
        mu_o,
        covariance: std::array::from_fn(|i| std::array::from_fn(|j| sigma[(i, j)])),
        xi_empirical: Vec::new(),
        sigma_o2_empirical: Vec::new(),
        lambda_opt: f64::NAN,
    };
    Ok((obs, rct, truth))
}

/// Independent Bernoulli(`p_i`) treatment.
pub fn assign_observational<R: Rng + ?Sized>(pop: &Population, rng: &mut R) -> Vec<bool> {
    pop.p.iter().map(|&p| rng.random::<f64>() < p).collect()
}

/// Simple random sample of `floor(n_k / 2)` treated units in each stratum.
pub fn assign_rct<R: Rng + ?Sized>(pop: &Population, rng: &mut R) -> Vec<bool> {
    let mut w = vec![false; pop.len()];
    for members in pop.stratum_members() {
        for j in index::sample(rng, members.len(), members.len() / 2) {
            w[members[j]] = true;
        }
    }
    w
}

/// Variance of the difference in means under complete randomization with
/// `floor(n_k / 2)` treated: `S^2 (1/n_t + 1/n_c)`, exact because effects are
/// constant within strata.
pub fn rct_design_variance(pop: &Population) -> Vec<f64> {
    pop.stratum_members()
        .iter()
        .map(|m| {
            let y: Vec<f64> = m.iter().map(|&i| pop.y0[i]).collect();
            let nt = (m.len() / 2) as f64;
            let nc = m.len() as f64 - nt;
            mean_and_sample_variance(&y).1 * (1.0 / nt + 1.0 / nc)
        })
        .collect()
}

/// `s_t / pbar + s_c / (1 - pbar)` per stratum, with `s_t = cov(Y(1), p)` and
/// `s_c = cov(Y(0), p)` over the stratum's units.
pub fn delta_method_bias(pop: &Population) -> Vec<f64> {
    pop.stratum_members()
        .iter()
        .map(|m| {
            let p: Vec<f64> = m.iter().map(|&i| pop.p[i]).collect();
            let y1: Vec<f64> = m.iter().map(|&i| pop.y1[i]).collect();
            let y0: Vec<f64> = m.iter().map(|&i| pop.y0[i]).collect();
            let pbar = compensated_sum(p.iter().copied()) / p.len() as f64;
            population_covariance(&y1, &p) / pbar + population_covariance(&y0, &p) / (1.0 - pbar)
        })
        .collect()
}
