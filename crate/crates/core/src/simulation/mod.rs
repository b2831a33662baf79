//! Synthetic populations and the Monte Carlo risk study.
//!
//! Each condition draws `outer_reps` populations. For each population the
//! treatment assignments are redrawn `inner_reps` times and every estimator's
//! weighted loss against the true effects is recorded. A further
//! `oracle_draws` assignments per population estimate the bias and variance
//! of the observational estimate for the oracle weight and are not used for
//! risk.
//!
//! Every random draw comes from a stream keyed by `(seed, purpose, outer,
//! inner)`, so results are bitwise identical for any thread count.

mod generate;

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use generate::{
    assign_observational, assign_rct, cohens_d, delta_method_bias, generate_populations,
    rct_design_variance, sample_covariance, scale_to_cohens_d, scale_to_cohens_d_pooled,
    stratum_boundaries, stratum_masses, stratum_of, true_propensity, CohensDenominator,
    ConfounderSelection, Population, SimTruth, COVARIATES,
};

use crate::causal::{
    build_fusion_input, diff_in_means, fit_propensity, fit_propensity_by_stratum, sipw, Adjustment,
    PropensityMode, StratifiedDataset, StudyRole, VarianceNormalization,
};
use crate::error::{Error, Result};
use crate::fusion::{weighted_loss, FusionInput, OracleSpec, ShrinkageOutput, WeightedLossSpec};
use crate::numeric::{compensated_sum, mean_and_sample_variance};
use crate::rng;
use crate::shrinkage::{
    estimate, oracle_lambda, A2Form, BiasWeighting, EstimateOptions, EstimatorId,
};

const POPULATION_STREAM: u64 = 1;
const OBS_ASSIGN_STREAM: u64 = 2;
const RCT_ASSIGN_STREAM: u64 = 3;
const ORACLE_STREAM: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrataScheme {
    /// Equal stratum masses `1/K`.
    #[default]
    Similar,
    /// Masses `2/(3K)` for the first half of the strata and `4/(3K)` for the rest.
    Variable,
}

/// One simulation condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_o: usize,
    pub n_r: usize,
    pub k: usize,
    pub strata_scheme: StrataScheme,
    /// Draw observational covariate means from `Uniform(-1/2, 1/2)` per population.
    pub covariate_shift: bool,
    pub adjustment: Adjustment,
    pub outer_reps: usize,
    pub inner_reps: usize,
    pub cohens_d: f64,
    pub seed: u64,
    /// Auxiliary assignments per population for the oracle's bias and variance.
    pub oracle_draws: usize,
    pub cohens_d_denominator: CohensDenominator,
    /// Multiplier on the selection index; 0 makes observational treatment a fair coin.
    pub selection_strength: f64,
    pub confounder_selection: ConfounderSelection,
    pub propensity_mode: PropensityMode,
    pub variance_normalization: VarianceNormalization,
    pub a2_form: A2Form,
    pub bias_weighting: BiasWeighting,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_o: 10_000,
            n_r: 1_000,
            k: 6,
            strata_scheme: StrataScheme::Similar,
            covariate_shift: false,
            adjustment: Adjustment::None,
            outer_reps: 25,
            inner_reps: 20,
            cohens_d: 0.2,
            seed: 2020,
            oracle_draws: 200,
            cohens_d_denominator: CohensDenominator::ControlSd,
            selection_strength: 1.0,
            confounder_selection: ConfounderSelection::Reinforcing,
            propensity_mode: PropensityMode::Shared,
            variance_normalization: VarianceNormalization::Population,
            a2_form: A2Form::Printed,
            bias_weighting: BiasWeighting::Loss,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.n_o == 0 || self.n_r == 0 {
            return bad(format!(
                "n_o and n_r must be positive, got {} and {}",
                self.n_o, self.n_r
            ));
        }
        if self.k < 3 {
            return bad(format!("k must be at least 3, got {}", self.k));
        }
        if self.strata_scheme == StrataScheme::Variable && self.k % 2 != 0 {
            return bad(format!("variable strata need an even k, got {}", self.k));
        }
        if self.outer_reps == 0 || self.inner_reps == 0 {
            return bad("outer_reps and inner_reps must be at least 1".into());
        }
        if self.oracle_draws < 2 {
            return bad(format!(
                "oracle_draws must be at least 2, got {}",
                self.oracle_draws
            ));
        }
        if !(self.cohens_d > 0.0 && self.cohens_d.is_finite()) {
            return bad(format!("cohens_d must be positive, got {}", self.cohens_d));
        }
        if !self.selection_strength.is_finite() {
            return bad("selection_strength must be finite".into());
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let c: Self = toml::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    /// Reads TOML when the extension is `.toml`, JSON otherwise.
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => Self::from_toml_str(&text),
            _ => Self::from_json_str(&text),
        }
    }

    /// Short name such as `k6-similar-noshift-none`.
    pub fn label(&self) -> String {
        let scheme = match self.strata_scheme {
            StrataScheme::Similar => "similar",
            StrataScheme::Variable => "variable",
        };
        let shift = if self.covariate_shift {
            "shift"
        } else {
            "noshift"
        };
        let adj = match self.adjustment {
            Adjustment::None => "none",
            Adjustment::Sipw => "sipw",
        };
        format!("k{}-{scheme}-{shift}-{adj}", self.k)
    }

    /// Reduced scale for quick checks: 2000 and 400 units, 10 by 10 replicates.
    pub fn quick(self) -> Self {
        Self {
            n_o: 2_000,
            n_r: 400,
            outer_reps: 10,
            inner_reps: 10,
            ..self
        }
    }
}

/// The full grid: K in {6, 20}, both strata schemes, with and without
/// covariate shift, each without adjustment and with SIPW.
pub fn paper_conditions(seed: u64) -> Vec<SimConfig> {
    let mut out = Vec::with_capacity(16);
    for adjustment in [Adjustment::None, Adjustment::Sipw] {
        for covariate_shift in [false, true] {
            for k in [6, 20] {
                for strata_scheme in [StrataScheme::Similar, StrataScheme::Variable] {
                    out.push(SimConfig {
                        k,
                        strata_scheme,
                        covariate_shift,
                        adjustment,
                        seed,
                        ..SimConfig::default()
                    });
                }
            }
        }
    }
    out
}

/// Estimators evaluated in every condition, in table order.
pub const ROSTER: [EstimatorId; 11] = EstimatorId::ALL;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskRow {
    pub name: String,
    /// Mean weighted loss over all replicates.
    pub risk: f64,
    /// Standard error of `risk`, clustered by population draw.
    pub se: f64,
    /// `100 (1 - risk / risk(tau_r))`.
    pub pct_reduction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskTable {
    pub label: String,
    pub config: SimConfig,
    pub cohens_d_definition: String,
    pub rows: Vec<RiskRow>,
    /// Truth and oracle diagnostics per population draw.
    pub populations: Vec<SimTruth>,
    /// Per-estimator losses in replicate order (outer-major), aligned with `rows`.
    #[serde(skip)]
    pub losses: Vec<Vec<f64>>,
}

impl RiskTable {
    fn index(&self, id: EstimatorId) -> Result<usize> {
        self.rows
            .iter()
            .position(|r| r.name == id.as_str())
            .ok_or_else(|| Error::InvalidParameter(format!("estimator {id} is not in the table")))
    }

    pub fn row(&self, id: EstimatorId) -> Result<&RiskRow> {
        Ok(&self.rows[self.index(id)?])
    }

    pub fn losses(&self, id: EstimatorId) -> Result<&[f64]> {
        Ok(&self.losses[self.index(id)?])
    }

    /// Mean of `loss(a) - loss(b)` and its standard error, clustered by
    /// population draw.
    pub fn paired_difference(&self, a: EstimatorId, b: EstimatorId) -> Result<(f64, f64)> {
        let la = self.losses(a)?;
        let lb = self.losses(b)?;
        let diff: Vec<f64> = la.iter().zip(lb).map(|(x, y)| x - y).collect();
        Ok(mean_and_clustered_se(&diff, self.config.outer_reps))
    }

    /// Columns `name,risk,se,pct_reduction` with round-trip precision.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["name", "risk", "se", "pct_reduction"])?;
        for r in &self.rows {
            w.write_record([
                r.name.clone(),
                r.risk.to_string(),
                r.se.to_string(),
                r.pct_reduction.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Config, rows, and per-population truth as pretty JSON.
    pub fn sidecar_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Mean and standard error, treating consecutive blocks of `len / clusters`
/// values as one cluster. With a single cluster the values are treated as
/// independent.
fn mean_and_clustered_se(values: &[f64], clusters: usize) -> (f64, f64) {
    let n = values.len();
    let mean = compensated_sum(values.iter().copied()) / n as f64;
    if clusters <= 1 || n <= 1 {
        let var = if n > 1 {
            mean_and_sample_variance(values).1
        } else {
            0.0
        };
        return (mean, (var / n as f64).sqrt());
    }
    let per = n / clusters;
    let means: Vec<f64> = values
        .chunks(per)
        .map(|c| compensated_sum(c.iter().copied()) / c.len() as f64)
        .collect();
    (
        mean,
        (mean_and_sample_variance(&means).1 / clusters as f64).sqrt(),
    )
}

/// The observational dataset for one assignment, with fitted propensities
/// when the configuration adjusts.
fn observational_data(
    config: &SimConfig,
    obs: &Population,
    treated: &[bool],
) -> Result<StratifiedDataset> {
    match config.adjustment {
        Adjustment::None => obs.observe(treated, StudyRole::Observational, None, false),
        Adjustment::Sipw => {
            let x = obs.covariate_rows();
            let p = match config.propensity_mode {
                PropensityMode::Shared => fit_propensity(&x, treated)?.probabilities,
                PropensityMode::PerStratum => {
                    fit_propensity_by_stratum(&x, treated, &obs.stratum, obs.k)?
                }
            };
            obs.observe(treated, StudyRole::Observational, Some(&p), false)
        }
    }
}

fn observational_estimate(
    config: &SimConfig,
    obs: &Population,
    outer: usize,
    draw: usize,
) -> Result<Vec<f64>> {
    let mut r = rng::stream(config.seed, &[ORACLE_STREAM, outer as u64, draw as u64]);
    let w = assign_observational(obs, &mut r);
    let data = observational_data(config, obs, &w)?;
    match config.adjustment {
        Adjustment::None => diff_in_means(&data),
        Adjustment::Sipw => sipw(&data),
    }
}

/// Oracle bias and variance of the observational estimate from auxiliary draws.
fn oracle_moments(
    config: &SimConfig,
    obs: &Population,
    tau: &[f64],
    outer: usize,
) -> Result<OracleSpec> {
    let draws: Vec<Vec<f64>> = (0..config.oracle_draws)
        .into_par_iter()
        .map(|j| {
            observational_estimate(config, obs, outer, j).map_err(|e| Error::Replicate {
                outer,
                inner: j,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;
    let (xi, var): (Vec<f64>, Vec<f64>) = (0..config.k)
        .map(|k| {
            let col: Vec<f64> = draws.iter().map(|d| d[k]).collect();
            let (m, v) = mean_and_sample_variance(&col);
            (m - tau[k], v)
        })
        .unzip();
    OracleSpec::new(xi, var)
}

fn replicate_losses(
    config: &SimConfig,
    obs: &Population,
    rct: &Population,
    truth: &SimTruth,
    weights: &WeightedLossSpec,
    outer: usize,
    inner: usize,
) -> Result<Vec<f64>> {
    let mut r_obs = rng::stream(
        config.seed,
        &[OBS_ASSIGN_STREAM, outer as u64, inner as u64],
    );
    let mut r_rct = rng::stream(
        config.seed,
        &[RCT_ASSIGN_STREAM, outer as u64, inner as u64],
    );
    let w_obs = assign_observational(obs, &mut r_obs);
    let w_rct = assign_rct(rct, &mut r_rct);
    let obs_data = observational_data(config, obs, &w_obs)?;
    let rct_data = rct.observe(&w_rct, StudyRole::Randomized, None, false)?;
    let input: FusionInput = build_fusion_input(
        &obs_data,
        &rct_data,
        config.adjustment,
        config.variance_normalization,
    )?;
    let opts = EstimateOptions {
        a2_form: config.a2_form,
        bias_weighting: config.bias_weighting,
        gs_a: None,
    };
    ROSTER
        .iter()
        .map(|&id| {
            let out = match id {
                EstimatorId::Oracle => ShrinkageOutput::from_factors(
                    &input,
                    vec![truth.lambda_opt; config.k],
                    id.as_str(),
                ),
                _ => estimate(id, &input, None, &opts)?,
            };
            weighted_loss(&out.estimate, &truth.tau, weights)
        })
        .collect()
}

struct OuterResult {
    truth: SimTruth,
    /// `[inner][estimator]`
    losses: Vec<Vec<f64>>,
}

fn run_outer(config: &SimConfig, outer: usize) -> Result<OuterResult> {
    let wrap = |inner: usize| {
        move |e: Error| Error::Replicate {
            outer,
            inner,
            source: Box::new(e),
        }
    };
    let mut r = rng::stream(config.seed, &[POPULATION_STREAM, outer as u64]);
    let (obs, rct, mut truth) = generate_populations(config, &mut r).map_err(wrap(0))?;
    let weights = WeightedLossSpec::new(truth.d.clone())?;

    let oracle = oracle_moments(config, &obs, &truth.tau, outer)?;
    truth.lambda_opt = oracle_lambda(
        &truth.sigma_r2_exact,
        &oracle,
        &weights,
        config.bias_weighting,
    )
    .map_err(wrap(0))?;
    truth.xi_empirical = oracle.xi;
    truth.sigma_o2_empirical = oracle.sigma_o2;

    let losses = (0..config.inner_reps)
        .into_par_iter()
        .map(|i| replicate_losses(config, &obs, &rct, &truth, &weights, outer, i).map_err(wrap(i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(OuterResult { truth, losses })
}

/// Runs one condition and summarizes every estimator's risk.
pub fn run_condition(config: &SimConfig) -> Result<RiskTable> {
    config.validate()?;
    let outers = (0..config.outer_reps)
        .into_par_iter()
        .map(|o| run_outer(config, o))
        .collect::<Result<Vec<_>>>()?;

    let losses: Vec<Vec<f64>> = (0..ROSTER.len())
        .map(|j| {
            outers
                .iter()
                .flat_map(|o| o.losses.iter().map(move |l| l[j]))
                .collect()
        })
        .collect();
    let summaries: Vec<(f64, f64)> = losses
        .iter()
        .map(|l| mean_and_clustered_se(l, config.outer_reps))
        .collect();
    let base = ROSTER
        .iter()
        .position(|&id| id == EstimatorId::TauR)
        .map(|j| summaries[j].0);
    let rows = ROSTER
        .iter()
        .zip(&summaries)
        .map(|(id, &(risk, se))| RiskRow {
            name: id.as_str().to_string(),
            risk,
            se,
            pct_reduction: match base {
                Some(_) if *id == EstimatorId::TauR => 0.0,
                Some(b) => 100.0 * (1.0 - risk / b),
                None => f64::NAN,
            },
        })
        .collect();
    Ok(RiskTable {
        label: config.label(),
        config: config.clone(),
        cohens_d_definition: config.cohens_d_denominator.describe().to_string(),
        rows,
        populations: outers.into_iter().map(|o| o.truth).collect(),
        losses,
    })
}
