//! Stratum-level effect estimates from unit-level study data.

mod io;
mod propensity;

use serde::{Deserialize, Serialize};

use crate::error::{Arm, Error, Result};
use crate::fusion::{FusionInput, WeightedLossSpec};
use crate::numeric::CompensatedSum;

pub use io::{read_csv, read_csv_path, write_csv};
pub use propensity::{fit_propensity, fit_propensity_by_stratum, PropensityFit, PROB_CLIP};

/// One study unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Unit {
    pub y: f64,
    pub treated: bool,
    pub stratum: usize,
    pub x: Vec<f64>,
    pub p_hat: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StudyRole {
    Observational,
    Randomized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratifiedDataset {
    pub units: Vec<Unit>,
    pub k: usize,
    pub role: StudyRole,
}

impl StratifiedDataset {
    /// Checks stratum labels and propensities. Arm sizes are checked by each
    /// estimator, since their requirements differ.
    pub fn new(units: Vec<Unit>, k: usize, role: StudyRole) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidParameter(
                "stratum count K must be positive".into(),
            ));
        }
        for (index, u) in units.iter().enumerate() {
            if u.stratum >= k {
                return Err(Error::StratumOutOfRange {
                    index,
                    stratum: u.stratum,
                    k,
                });
            }
            if let Some(p) = u.p_hat {
                if !(p > 0.0 && p < 1.0) {
                    return Err(Error::InvalidPropensity { index, value: p });
                }
            }
        }
        Ok(Self { units, k, role })
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    /// Number of covariates, taken from the first unit.
    pub fn n_covariates(&self) -> usize {
        self.units.first().map_or(0, |u| u.x.len())
    }

    pub fn stratum_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.k];
        for u in &self.units {
            counts[u.stratum] += 1;
        }
        counts
    }

    /// Unit indices per stratum, split into (treated, control).
    pub fn arm_indices(&self) -> Vec<(Vec<usize>, Vec<usize>)> {
        let mut out = vec![(Vec::new(), Vec::new()); self.k];
        for (i, u) in self.units.iter().enumerate() {
            let slot = &mut out[u.stratum];
            if u.treated {
                slot.0.push(i);
            } else {
                slot.1.push(i);
            }
        }
        out
    }

    /// Units of stratum `k`, cloned.
    pub fn stratum_units(&self, k: usize) -> Vec<Unit> {
        self.units
            .iter()
            .filter(|u| u.stratum == k)
            .cloned()
            .collect()
    }

    pub fn has_propensities(&self) -> bool {
        self.units.iter().all(|u| u.p_hat.is_some())
    }

    /// Replaces every `p_hat` with the given values.
    pub fn with_propensities(mut self, p: &[f64]) -> Result<Self> {
        if p.len() != self.units.len() {
            return Err(Error::DimensionMismatch {
                what: "propensities",
                expected: self.units.len(),
                found: p.len(),
            });
        }
        for (index, (u, &v)) in self.units.iter_mut().zip(p).enumerate() {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::InvalidPropensity { index, value: v });
            }
            u.p_hat = Some(v);
        }
        Ok(self)
    }
}

fn require_arm(stratum: usize, arm: Arm, size: usize, required: usize) -> Result<()> {
    match size {
        0 if required >= 1 => Err(Error::EmptyArm { stratum, arm }),
        n if n < required => Err(Error::ArmTooSmall {
            stratum,
            arm,
            size: n,
            required,
        }),
        _ => Ok(()),
    }
}

fn mean_of(data: &StratifiedDataset, idx: &[usize]) -> f64 {
    let mut s = CompensatedSum::new();
    for &i in idx {
        s.add(data.units[i].y);
    }
    s.value() / idx.len() as f64
}

/// Treated-minus-control mean outcome in each stratum.
pub fn diff_in_means(data: &StratifiedDataset) -> Result<Vec<f64>> {
    data.arm_indices()
        .iter()
        .enumerate()
        .map(|(k, (t, c))| {
            require_arm(k, Arm::Treated, t.len(), 1)?;
            require_arm(k, Arm::Control, c.len(), 1)?;
            Ok(mean_of(data, t) - mean_of(data, c))
        })
        .collect()
}

/// Normalized-weight mean of one arm: `sum(w y) / sum(w)`.
pub(crate) fn normalized_weighted_mean(ys: &[f64], ws: &[f64]) -> f64 {
    let mut num = CompensatedSum::new();
    let mut den = CompensatedSum::new();
    for (y, w) in ys.iter().zip(ws) {
        num.add(w * y);
        den.add(*w);
    }
    num.value() / den.value()
}

/// Stabilized inverse-probability-weighted contrast in each stratum: treated
/// units weighted by `1/p_hat`, controls by `1/(1 - p_hat)`, weights
/// normalized within each arm.
pub fn sipw(data: &StratifiedDataset) -> Result<Vec<f64>> {
    for (index, u) in data.units.iter().enumerate() {
        match u.p_hat {
            None => return Err(Error::MissingPropensity(index)),
            Some(p) if !(p > 0.0 && p < 1.0) => {
                return Err(Error::InvalidPropensity { index, value: p })
            }
            _ => {}
        }
    }
    data.arm_indices()
        .iter()
        .enumerate()
        .map(|(k, (t, c))| {
            require_arm(k, Arm::Treated, t.len(), 1)?;
            require_arm(k, Arm::Control, c.len(), 1)?;
            Ok(sipw_arm(data, t, true) - sipw_arm(data, c, false))
        })
        .collect()
}

fn sipw_arm(data: &StratifiedDataset, idx: &[usize], treated: bool) -> f64 {
    let mut num = CompensatedSum::new();
    let mut den = CompensatedSum::new();
    for &i in idx {
        let u = &data.units[i];
        let p = u.p_hat.expect("checked by caller");
        let w = if treated { 1.0 / p } else { 1.0 / (1.0 - p) };
        num.add(w * u.y);
        den.add(w);
    }
    num.value() / den.value()
}

/// Normalization of the within-arm sum of squares in [`neyman_variance`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceNormalization {
    /// `1/n` centering, so each arm contributes `sum (y - ybar)^2 / n^2`.
    /// Biased low by a factor `(n - 1)/n` relative to the usual sample variance.
    #[default]
    Population,
    /// Usual `1/(n - 1)` sample variance.
    Sample,
}

/// Neyman variance estimate of each stratum's difference in means:
/// `s_t^2 / n_t + s_c^2 / n_c`.
pub fn neyman_variance(
    data: &StratifiedDataset,
    normalization: VarianceNormalization,
) -> Result<Vec<f64>> {
    let out: Vec<f64> = data
        .arm_indices()
        .iter()
        .enumerate()
        .map(|(k, (t, c))| {
            require_arm(k, Arm::Treated, t.len(), 2)?;
            require_arm(k, Arm::Control, c.len(), 2)?;
            Ok(arm_variance(data, t, normalization) + arm_variance(data, c, normalization))
        })
        .collect::<Result<_>>()?;
    for (k, v) in out.iter().enumerate() {
        if *v <= 0.0 {
            log::warn!(
                "stratum {k}: estimated RCT variance is zero; shrinkage needs positive variances"
            );
        }
    }
    Ok(out)
}

fn arm_variance(data: &StratifiedDataset, idx: &[usize], norm: VarianceNormalization) -> f64 {
    let n = idx.len() as f64;
    let mean = mean_of(data, idx);
    let mut ss = CompensatedSum::new();
    for &i in idx {
        let r = data.units[i].y - mean;
        ss.add(r * r);
    }
    let s2 = match norm {
        VarianceNormalization::Population => ss.value() / n,
        VarianceNormalization::Sample => ss.value() / (n - 1.0),
    };
    s2 / n
}

/// Stratum frequencies `d_k = n_k / n`.
pub fn stratum_weights(data: &StratifiedDataset) -> Result<WeightedLossSpec> {
    let counts = data.stratum_counts();
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyStratum(k));
    }
    let n = data.len() as f64;
    WeightedLossSpec::new(counts.iter().map(|&c| c as f64 / n).collect())
}

/// How the observational effect is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Adjustment {
    #[default]
    None,
    Sipw,
}

/// Scope of the propensity model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PropensityMode {
    /// One model across all strata (strata are subgroups of one treatment).
    #[default]
    Shared,
    /// One model per stratum (strata are distinct treatments).
    PerStratum,
}

/// Fills in missing `p_hat` by logistic regression on the covariates.
pub fn ensure_propensities(
    data: StratifiedDataset,
    mode: PropensityMode,
) -> Result<StratifiedDataset> {
    if data.has_propensities() {
        return Ok(data);
    }
    if data.n_covariates() == 0 {
        return Err(Error::InvalidParameter(
            "SIPW needs p_hat for every unit; supply p_hat or covariates x1..xp so a propensity model can be fitted".into(),
        ));
    }
    let x: Vec<&[f64]> = data.units.iter().map(|u| u.x.as_slice()).collect();
    let w: Vec<bool> = data.units.iter().map(|u| u.treated).collect();
    let p = match mode {
        PropensityMode::Shared => fit_propensity(&x, &w)?.probabilities,
        PropensityMode::PerStratum => {
            let strata: Vec<usize> = data.units.iter().map(|u| u.stratum).collect();
            fit_propensity_by_stratum(&x, &w, &strata, data.k)?
        }
    };
    data.with_propensities(&p)
}

/// Builds the fusion input: RCT difference in means with Neyman variances,
/// observational difference in means or SIPW, and `d_k = n_ok / n_o`.
pub fn build_fusion_input(
    obs: &StratifiedDataset,
    rct: &StratifiedDataset,
    adjustment: Adjustment,
    normalization: VarianceNormalization,
) -> Result<FusionInput> {
    if obs.k != rct.k {
        return Err(Error::DimensionMismatch {
            what: "RCT stratum count",
            expected: obs.k,
            found: rct.k,
        });
    }
    let tau_r = diff_in_means(rct)?;
    let sigma_r2 = neyman_variance(rct, normalization)?;
    let tau_o = match adjustment {
        Adjustment::None => diff_in_means(obs)?,
        Adjustment::Sipw => sipw(obs)?,
    };
    let weights = stratum_weights(obs)?;
    FusionInput::new(tau_r, tau_o, sigma_r2, None, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn unit(y: f64, treated: bool, stratum: usize, p: Option<f64>) -> Unit {
        Unit {
            y,
            treated,
            stratum,
            x: vec![],
            p_hat: p,
        }
    }

    fn ds(units: Vec<Unit>, k: usize) -> StratifiedDataset {
        StratifiedDataset::new(units, k, StudyRole::Observational).unwrap()
    }

    #[test]
    fn diff_in_means_hand_example() {
        let d = ds(
            vec![
                unit(3.0, true, 0, None),
                unit(5.0, true, 0, None),
                unit(1.0, false, 0, None),
                unit(1.0, false, 0, None),
            ],
            1,
        );
        assert_eq!(diff_in_means(&d).unwrap(), vec![3.0]);
    }

    #[test]
    fn diff_in_means_constant_outcomes() {
        let units = (0..10)
            .map(|i| unit(4.2, i % 2 == 0, i % 2, None))
            .collect::<Vec<_>>();
        let mut units = units;
        units.extend((0..4).map(|i| unit(4.2, i % 2 == 1, i % 2, None)));
        assert_eq!(diff_in_means(&ds(units, 2)).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn diff_in_means_names_empty_arm() {
        let d = ds(
            vec![
                unit(1.0, true, 0, None),
                unit(2.0, false, 0, None),
                unit(1.0, true, 1, None),
            ],
            2,
        );
        let err = diff_in_means(&d).unwrap_err();
        assert!(
            matches!(
                err,
                Error::EmptyArm {
                    stratum: 1,
                    arm: Arm::Control
                }
            ),
            "{err}"
        );
        assert!(err.to_string().contains("stratum 1") && err.to_string().contains("control"));
    }

    #[test]
    fn sipw_hand_example() {
        // Treated term: (1/0.2 + 3/0.8) / (1/0.2 + 1/0.8) = 8.75 / 6.25 = 1.4.
        let d = ds(
            vec![
                unit(1.0, true, 0, Some(0.2)),
                unit(3.0, true, 0, Some(0.8)),
                unit(0.0, false, 0, Some(0.5)),
            ],
            1,
        );
        assert!((sipw(&d).unwrap()[0] - 1.4).abs() < 1e-15);
    }

    #[test]
    fn sipw_errors() {
        let d = ds(
            vec![unit(1.0, true, 0, Some(0.3)), unit(0.0, false, 0, None)],
            1,
        );
        assert!(matches!(sipw(&d), Err(Error::MissingPropensity(1))));
        let mut d = ds(
            vec![
                unit(1.0, true, 0, Some(0.3)),
                unit(0.0, false, 0, Some(0.3)),
            ],
            1,
        );
        d.units[0].p_hat = Some(1.0);
        assert!(matches!(
            sipw(&d),
            Err(Error::InvalidPropensity { index: 0, .. })
        ));
        assert!(StratifiedDataset::new(
            vec![unit(0.0, true, 0, Some(0.0))],
            1,
            StudyRole::Observational
        )
        .is_err());
    }

    #[test]
    fn neyman_hand_example() {
        // Each arm {0, 2}: centered sum of squares 2, /n = 1, /n again = 0.5.
        let d = ds(
            vec![
                unit(0.0, true, 0, None),
                unit(2.0, true, 0, None),
                unit(0.0, false, 0, None),
                unit(2.0, false, 0, None),
            ],
            1,
        );
        assert_eq!(
            neyman_variance(&d, VarianceNormalization::Population).unwrap(),
            vec![1.0]
        );
        assert_eq!(
            neyman_variance(&d, VarianceNormalization::Sample).unwrap(),
            vec![2.0]
        );
    }

    #[test]
    fn neyman_constant_arms_give_zero() {
        let d = ds(
            vec![
                unit(1.0, true, 0, None),
                unit(1.0, true, 0, None),
                unit(5.0, false, 0, None),
                unit(5.0, false, 0, None),
            ],
            1,
        );
        assert_eq!(
            neyman_variance(&d, VarianceNormalization::Population).unwrap(),
            vec![0.0]
        );
    }

    #[test]
    fn neyman_requires_two_per_arm() {
        let d = ds(
            vec![
                unit(0.0, true, 0, None),
                unit(2.0, true, 0, None),
                unit(0.0, false, 0, None),
            ],
            1,
        );
        assert!(matches!(
            neyman_variance(&d, VarianceNormalization::Population),
            Err(Error::ArmTooSmall {
                stratum: 0,
                arm: Arm::Control,
                size: 1,
                required: 2
            })
        ));
    }

    #[test]
    fn stratum_weight_examples() {
        let mut units: Vec<Unit> = (0..100).map(|_| unit(0.0, true, 0, None)).collect();
        units.extend((0..300).map(|_| unit(0.0, true, 1, None)));
        assert_eq!(stratum_weights(&ds(units, 2)).unwrap().d(), &[0.25, 0.75]);
        let units: Vec<Unit> = (0..30).map(|i| unit(0.0, true, i % 3, None)).collect();
        for d in stratum_weights(&ds(units, 3)).unwrap().d() {
            assert!((d - 1.0 / 3.0).abs() < 1e-15);
        }
        let units = vec![unit(0.0, true, 0, None)];
        assert!(matches!(
            stratum_weights(&ds(units, 2)),
            Err(Error::EmptyStratum(1))
        ));
    }

    #[test]
    fn missing_covariates_advises_supplying_them() {
        let d = ds(vec![unit(1.0, true, 0, None), unit(0.0, false, 0, None)], 1);
        let msg = ensure_propensities(d, PropensityMode::Shared)
            .unwrap_err()
            .to_string();
        assert!(msg.contains("covariates"), "{msg}");
    }

    fn arb_dataset() -> impl Strategy<Value = StratifiedDataset> {
        (1usize..4).prop_flat_map(|k| {
            proptest::collection::vec(
                (-5.0f64..5.0, any::<bool>(), 0..k, 0.05f64..0.95),
                4 * k..40,
            )
            .prop_map(move |raw| {
                let mut units: Vec<Unit> = raw
                    .into_iter()
                    .map(|(y, t, s, p)| unit(y, t, s, Some(p)))
                    .collect();
                for s in 0..k {
                    units.push(unit(0.5, true, s, Some(0.4)));
                    units.push(unit(-0.5, false, s, Some(0.6)));
                }
                ds(units, k)
            })
        })
    }

    proptest! {
        #[test]
        fn sipw_with_constant_propensity_equals_diff_in_means(data in arb_dataset(), c in 0.01f64..0.99) {
            let mut data = data;
            // Constant within stratum-arm, different across cells.
            for u in &mut data.units {
                u.p_hat = Some(if u.treated { c } else { (c + 0.3 * u.stratum as f64).fract().max(0.01) });
            }
            let a = sipw(&data).unwrap();
            let b = diff_in_means(&data).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }

        #[test]
        fn affine_outcome_equivariance(data in arb_dataset(), a in -3.0f64..3.0, b in -10.0f64..10.0) {
            let mut moved = data.clone();
            for u in &mut moved.units {
                u.y = a * u.y + b;
            }
            for f in [diff_in_means, sipw] {
                let base = f(&data).unwrap();
                let out = f(&moved).unwrap();
                for (x, y) in base.iter().zip(&out) {
                    prop_assert!((a * x - y).abs() <= 1e-9 * (1.0 + y.abs()));
                }
            }
        }

        #[test]
        fn estimates_invariant_to_unit_order(data in arb_dataset(), rot in 0usize..50) {
            let mut perm = data.clone();
            let n = perm.units.len();
            perm.units.rotate_left(rot % n);
            perm.units.reverse();
            let a = diff_in_means(&data).unwrap();
            let b = diff_in_means(&perm).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
            }
        }

        #[test]
        fn neyman_scales_quadratically(data in arb_dataset()) {
            let mut doubled = data.clone();
            for u in &mut doubled.units {
                u.y *= 2.0;
            }
            if let (Ok(v), Ok(v2)) = (
                neyman_variance(&data, VarianceNormalization::Population),
                neyman_variance(&doubled, VarianceNormalization::Population),
            ) {
                for (x, y) in v.iter().zip(&v2) {
                    prop_assert!((4.0 * x - y).abs() <= 1e-12 * (1.0 + y.abs()));
                }
            }
        }
    }
}
