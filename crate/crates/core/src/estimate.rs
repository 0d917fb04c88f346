//! Monte-Carlo point estimates with their standard error and seed provenance.

use serde::{Deserialize, Serialize};

/// A scalar statistic computed from one batch of samples.
///
/// `std_error` is the sample standard deviation (n - 1 denominator) divided by
/// `sqrt(n_samples)`, computed from the same batch as `value`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl Estimate {
    /// Mean and standard error of `samples`.
    ///
    /// A batch whose entries are all identical gets a standard error of exactly
    /// zero, so exact identities (zero drift, constant integrands) stay exact.
    pub fn from_samples(samples: &[f64], seed: u64) -> Self {
        let n = samples.len();
        assert!(n > 0, "estimate needs at least one sample");
        let mean = samples.iter().sum::<f64>() / n as f64;
        let first = samples[0];
        if samples.iter().all(|&s| s == first) {
            return Self::exact(first, n, seed);
        }
        let ss: f64 = samples.iter().map(|s| (s - mean) * (s - mean)).sum();
        Self {
            value: mean,
            std_error: (ss / (n - 1) as f64).sqrt() / (n as f64).sqrt(),
            n_samples: n,
            seed,
        }
    }

    /// Exact value carried in an `Estimate` shell (zero standard error).
    pub fn exact(value: f64, n_samples: usize, seed: u64) -> Self {
        Self {
            value,
            std_error: 0.0,
            n_samples: n_samples.max(1),
            seed,
        }
    }

    /// Standardized deviation `|value - reference| / std_error`.
    ///
    /// Returns 0 when the deviation is exactly zero and infinity when the
    /// estimate has no spread but misses the reference.
    pub fn z_score(&self, reference: f64) -> f64 {
        standardized(self.value - reference, self.std_error)
    }

    pub fn within(&self, reference: f64, n_se: f64) -> bool {
        (self.value - reference).abs() <= n_se * self.std_error
    }
}

/// `|diff| / se` with the conventions of [`Estimate::z_score`].
pub fn standardized(diff: f64, se: f64) -> f64 {
    if diff == 0.0 {
        0.0
    } else if se > 0.0 {
        diff.abs() / se
    } else {
        f64::INFINITY
    }
}

/// Standard error of independent estimates combined in quadrature.
pub fn combined_se(parts: &[f64]) -> f64 {
    parts.iter().map(|s| s * s).sum::<f64>().sqrt()
}

/// Ratio-of-means estimate `mean(num) / mean(den)` with a delta-method
/// standard error; both slices come from the same (common) draws.
pub fn ratio_estimate(num: &[f64], den: &[f64], seed: u64) -> Estimate {
    assert_eq!(num.len(), den.len());
    let n = num.len();
    let mn = num.iter().sum::<f64>() / n as f64;
    let md = den.iter().sum::<f64>() / n as f64;
    let r = mn / md;
    let resid: Vec<f64> = num.iter().zip(den).map(|(a, b)| (a - r * b) / md).collect();
    let se = Estimate::from_samples(&resid, seed).std_error;
    Estimate {
        value: r,
        std_error: se,
        n_samples: n,
        seed,
    }
}
