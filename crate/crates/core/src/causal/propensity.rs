//! Logistic-regression propensity model fitted by iteratively reweighted least squares.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Fitted probabilities are clipped into `[PROB_CLIP, 1 - PROB_CLIP]`.
pub const PROB_CLIP: f64 = 1e-6;

const MAX_ITER: usize = 100;
const COEF_TOL: f64 = 1e-8;
/// Linear predictors beyond this magnitude mean the likelihood is being
/// pushed to a boundary.
const SEPARATION_ETA: f64 = 30.0;

#[derive(Debug, Clone, PartialEq)]
pub struct PropensityFit {
    /// Intercept first, then one slope per covariate.
    pub coefficients: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

#[inline]
fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

fn design_rank(x: &[&[f64]], p: usize) -> usize {
    let n = x.len();
    let mut m = DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { x[i][j - 1] });
    // Column scaling keeps the rank test independent of covariate units.
    for mut col in m.column_iter_mut() {
        let norm = col.norm();
        if norm > 0.0 {
            col /= norm;
        }
    }
    // R from a Householder QR has the design's singular values and is tiny.
    let sv = m.qr().r().singular_values();
    let max = sv.max();
    sv.iter().filter(|&&s| s > max * 1e-10).count()
}

/// Fits `P(W = 1 | x) = logistic(b0 + x' b)` with Newton/IRLS steps from zero.
///
/// Stops when the largest coefficient change is below `1e-8` or after 100
/// iterations. Rank-deficient designs and (quasi-)separated data are errors.
pub fn fit_propensity(x: &[&[f64]], w: &[bool]) -> Result<PropensityFit> {
    let n = x.len();
    if w.len() != n {
        return Err(Error::DimensionMismatch {
            what: "treatment vector",
            expected: n,
            found: w.len(),
        });
    }
    let p = x.first().map_or(0, |r| r.len());
    if let Some(bad) = x.iter().position(|r| r.len() != p) {
        return Err(Error::DimensionMismatch {
            what: "covariate row",
            expected: p,
            found: x[bad].len(),
        });
    }
    if n <= p + 1 {
        return Err(Error::InvalidParameter(format!(
            "propensity model needs more than {} units, got {n}",
            p + 1
        )));
    }
    if design_rank(x, p) < p + 1 {
        return Err(Error::RankDeficient);
    }
    let n_treated = w.iter().filter(|&&t| t).count();
    if n_treated == 0 || n_treated == n {
        return Err(Error::Separation);
    }

    let dim = p + 1;
    let mut beta = DVector::<f64>::zeros(dim);
    let mut eta = vec![0.0; n];
    let mut converged = false;
    let mut iterations = 0;
    // Row-major design with a leading intercept column.
    let design: Vec<f64> = x
        .iter()
        .flat_map(|r| std::iter::once(1.0).chain(r.iter().copied()))
        .collect();
    while iterations < MAX_ITER {
        iterations += 1;
        // Upper triangle of X'WX and the score, accumulated in flat buffers.
        let mut h = vec![0.0; dim * dim];
        let mut g = vec![0.0; dim];
        for ((row, &e), &treated) in design.chunks_exact(dim).zip(&eta).zip(w) {
            let mu = logistic(e);
            let wt = (mu * (1.0 - mu)).max(1e-300);
            let resid = if treated { 1.0 - mu } else { -mu };
            for (a, &ra) in row.iter().enumerate() {
                g[a] += ra * resid;
                let ra_wt = ra * wt;
                for (hb, &rb) in h[a * dim + a..(a + 1) * dim].iter_mut().zip(&row[a..]) {
                    *hb += ra_wt * rb;
                }
            }
        }
        let hess = DMatrix::from_fn(dim, dim, |a, b| {
            if a <= b {
                h[a * dim + b]
            } else {
                h[b * dim + a]
            }
        });
        let grad = DVector::from_vec(g);
        let step = match hess.cholesky() {
            Some(ch) => ch.solve(&grad),
            None => return Err(Error::Separation),
        };
        if step.iter().any(|s| !s.is_finite()) {
            return Err(Error::Separation);
        }
        beta += &step;
        for (e, row) in eta.iter_mut().zip(design.chunks_exact(dim)) {
            *e = row.iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
        }
        if step.amax() < COEF_TOL {
            converged = true;
            break;
        }
    }
    let max_eta = eta.iter().fold(0.0f64, |m, e| m.max(e.abs()));
    if !converged && max_eta > SEPARATION_ETA {
        return Err(Error::Separation);
    }
    let probabilities = eta
        .iter()
        .map(|&e| logistic(e).clamp(PROB_CLIP, 1.0 - PROB_CLIP))
        .collect();
    Ok(PropensityFit {
        coefficients: beta.iter().copied().collect(),
        probabilities,
        iterations,
        converged,
    })
}

/// One logistic model per stratum; returns probabilities in the original unit order.
pub fn fit_propensity_by_stratum(
    x: &[&[f64]],
    w: &[bool],
    strata: &[usize],
    k: usize,
) -> Result<Vec<f64>> {
    let mut out = vec![f64::NAN; x.len()];
    for s in 0..k {
        let idx: Vec<usize> = (0..x.len()).filter(|&i| strata[i] == s).collect();
        if idx.is_empty() {
            return Err(Error::EmptyStratum(s));
        }
        let xs: Vec<&[f64]> = idx.iter().map(|&i| x[i]).collect();
        let ws: Vec<bool> = idx.iter().map(|&i| w[i]).collect();
        let fit = fit_propensity(&xs, &ws)?;
        for (&i, p) in idx.iter().zip(fit.probabilities) {
            out[i] = p;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn rows(x: &[Vec<f64>]) -> Vec<&[f64]> {
        x.iter().map(|r| r.as_slice()).collect()
    }

    #[test]
    fn recovers_known_coefficients() {
        let mut rng = crate::rng::stream(11, &[1]);
        let n = 20_000;
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..2).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let w: Vec<bool> = x
            .iter()
            .map(|r| rng.random::<f64>() < logistic(-0.5 + 1.0 * r[0] - 0.7 * r[1]))
            .collect();
        let fit = fit_propensity(&rows(&x), &w).unwrap();
        assert!(fit.converged);
        let truth = [-0.5, 1.0, -0.7];
        for (b, t) in fit.coefficients.iter().zip(truth) {
            assert!((b - t).abs() < 0.06, "{:?}", fit.coefficients);
        }
    }

    #[test]
    fn independent_treatment_gives_flat_probabilities() {
        // SE of the fitted mean probability is about sqrt(q(1-q)/n).
        let mut rng = crate::rng::stream(12, &[1]);
        let n = 5_000;
        let q = 0.3;
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..3).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let w: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < q).collect();
        let fit = fit_propensity(&rows(&x), &w).unwrap();
        let mean_w = w.iter().filter(|&&t| t).count() as f64 / n as f64;
        let slope_se = 1.0 / (n as f64 * q * (1.0 - q)).sqrt();
        for b in &fit.coefficients[1..] {
            assert!(b.abs() < 3.0 * slope_se * 1.5, "{:?}", fit.coefficients);
        }
        let mean_p = fit.probabilities.iter().sum::<f64>() / n as f64;
        assert!((mean_p - mean_w).abs() < 1e-8);
        let spread = fit
            .probabilities
            .iter()
            .map(|p| (p - mean_w).abs())
            .fold(0.0, f64::max);
        assert!(spread < 0.1);
    }

    #[test]
    fn duplicated_column_is_rank_deficient() {
        let x: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64, i as f64]).collect();
        let w: Vec<bool> = (0..50).map(|i| i % 3 == 0).collect();
        assert!(matches!(
            fit_propensity(&rows(&x), &w),
            Err(Error::RankDeficient)
        ));
    }

    #[test]
    fn perfect_separation_is_reported() {
        let x: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64 - 20.0]).collect();
        let w: Vec<bool> = (0..40).map(|i| i >= 20).collect();
        assert!(matches!(
            fit_propensity(&rows(&x), &w),
            Err(Error::Separation)
        ));
    }

    #[test]
    fn probabilities_respect_clip_bounds() {
        let mut rng = crate::rng::stream(13, &[]);
        let x: Vec<Vec<f64>> = (0..400)
            .map(|_| vec![StandardNormal.sample(&mut rng)])
            .collect();
        let w: Vec<bool> = x
            .iter()
            .map(|r| rng.random::<f64>() < logistic(6.0 * r[0]))
            .collect();
        let fit = fit_propensity(&rows(&x), &w).unwrap();
        assert!(fit
            .probabilities
            .iter()
            .all(|&p| (PROB_CLIP..=1.0 - PROB_CLIP).contains(&p)));
    }

    #[test]
    fn per_stratum_fit_restores_unit_order() {
        let mut rng = crate::rng::stream(14, &[]);
        let n = 600;
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![StandardNormal.sample(&mut rng)])
            .collect();
        let strata: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let w: Vec<bool> = (0..n)
            .map(|i| {
                rng.random::<f64>()
                    < if strata[i] == 0 {
                        0.2
                    } else {
                        logistic(x[i][0])
                    }
            })
            .collect();
        let p = fit_propensity_by_stratum(&rows(&x), &w, &strata, 2).unwrap();
        let sub: Vec<usize> = (0..n).filter(|&i| strata[i] == 1).collect();
        let xs: Vec<&[f64]> = sub.iter().map(|&i| x[i].as_slice()).collect();
        let ws: Vec<bool> = sub.iter().map(|&i| w[i]).collect();
        let direct = fit_propensity(&xs, &ws).unwrap().probabilities;
        for (j, &i) in sub.iter().enumerate() {
            assert_eq!(p[i], direct[j]);
        }
    }
}
