//! Point estimates with confidence intervals.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

pub const DEFAULT_LEVEL: f64 = 0.95;

/// Two-sided normal quantile for a confidence level.
pub fn z_for_level(level: f64) -> f64 {
    assert!(level > 0.0 && level < 1.0, "confidence level must lie in (0, 1)");
    Normal::standard().inverse_cdf(0.5 + level / 2.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_err: f64,
    pub n: u64,
    pub level: f64,
    pub lo: f64,
    pub hi: f64,
    /// Which estimator produced this (e.g. `spanning`, `chi`).
    pub tag: String,
}

impl Estimate {
    /// Wilson score interval for `successes` out of `n` Bernoulli trials.
    pub fn wilson(successes: u64, n: u64, level: f64, tag: impl Into<String>) -> Self {
        assert!(n > 0, "empty sample");
        let z = z_for_level(level);
        let nf = n as f64;
        let phat = successes as f64 / nf;
        let z2 = z * z;
        let denom = 1.0 + z2 / nf;
        let center = (phat + z2 / (2.0 * nf)) / denom;
        let half = z / denom * (phat * (1.0 - phat) / nf + z2 / (4.0 * nf * nf)).sqrt();
        Estimate {
            value: phat,
            std_err: (phat * (1.0 - phat) / nf).sqrt(),
            n,
            level,
            lo: (center - half).clamp(0.0, phat),
            hi: (center + half).clamp(phat, 1.0),
            tag: tag.into(),
        }
    }

    /// Sample mean with a normal-approximation interval.
    pub fn mean(sum: f64, sum_sq: f64, n: u64, level: f64, tag: impl Into<String>) -> Self {
        assert!(n > 0, "empty sample");
        let nf = n as f64;
        let mean = sum / nf;
        let var = if n > 1 {
            ((sum_sq - nf * mean * mean) / (nf - 1.0)).max(0.0)
        } else {
            0.0
        };
        let se = (var / nf).sqrt();
        let z = z_for_level(level);
        Estimate {
            value: mean,
            std_err: se,
            n,
            level,
            lo: mean - z * se,
            hi: mean + z * se,
            tag: tag.into(),
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    /// `|value - x|` in standard errors; infinite if the error is zero and
    /// the values differ.
    pub fn z_score(&self, x: f64) -> f64 {
        let diff = (self.value - x).abs();
        if diff == 0.0 {
            0.0
        } else if self.std_err == 0.0 {
            f64::INFINITY
        } else {
            diff / self.std_err
        }
    }
}

/// Two-proportion z statistic `(a - b) / se`, pooled standard errors.
pub fn two_sample_z(a: &Estimate, b: &Estimate) -> f64 {
    let se = (a.std_err.powi(2) + b.std_err.powi(2)).sqrt();
    let diff = a.value - b.value;
    if se == 0.0 {
        if diff == 0.0 {
            0.0
        } else {
            diff.signum() * f64::INFINITY
        }
    } else {
        diff / se
    }
}
