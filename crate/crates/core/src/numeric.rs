//! Small numerical helpers shared across modules.

/// Neumaier-compensated running sum.
///
/// Accumulation order still matters for the last bit, so callers that need
/// schedule-independent results must feed values in a fixed order.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    compensation: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

impl Extend<f64> for CompensatedSum {
    fn extend<I: IntoIterator<Item = f64>>(&mut self, iter: I) {
        for x in iter {
            self.add(x);
        }
    }
}

pub fn compensated_sum<I: IntoIterator<Item = f64>>(iter: I) -> f64 {
    let mut acc = CompensatedSum::new();
    acc.extend(iter);
    acc.value()
}

/// Mean and unbiased (n - 1) sample variance.
pub fn mean_and_sample_variance(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = compensated_sum(xs.iter().copied()) / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let ss = compensated_sum(xs.iter().map(|x| (x - mean) * (x - mean)));
    (mean, ss / (n - 1) as f64)
}

/// Population covariance (1/n normalization) of two equal-length slices.
pub fn population_covariance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = compensated_sum(a.iter().copied()) / n;
    let mb = compensated_sum(b.iter().copied()) / n;
    compensated_sum(a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb))) / n
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let xs = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(compensated_sum(xs), 2.0);
    }

    #[test]
    fn sample_variance_matches_hand_computation() {
        let (m, v) = mean_and_sample_variance(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((v - 5.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn covariance_of_independent_pattern_is_zero() {
        let a = [1.0, -1.0, 1.0, -1.0];
        let b = [1.0, 1.0, -1.0, -1.0];
        assert_eq!(population_covariance(&a, &b), 0.0);
    }
}
