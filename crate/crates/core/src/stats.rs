//! Summary statistics and the Kolmogorov–Smirnov distance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sample mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
    pub count: usize,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Result<Self> {
        if xs.is_empty() {
            return Err(Error::EmptySample);
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Ok(Self {
            mean,
            std_error: (var / n).sqrt(),
            count: xs.len(),
        })
    }

    /// Whether `value` lies within `k` standard errors of the mean.
    pub fn covers(&self, value: f64, k: f64) -> bool {
        (self.mean - value).abs() <= k * self.std_error
    }
}

/// Empirical quantile with linear interpolation between order statistics.
/// `sorted` must be ascending.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::EmptySample);
    }
    let q = q.clamp(0.0, 1.0);
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Ok(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

pub fn sorted_copy(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Sup-norm distance between the empirical CDF of `samples` and `cdf`.
pub fn ks_statistic<F>(samples: &[f64], cdf: F) -> Result<f64>
where
    F: Fn(f64) -> f64,
{
    if samples.len() < 2 {
        return Err(Error::EmptySample);
    }
    let sorted = sorted_copy(samples);
    let n = sorted.len() as f64;
    let mut sup = 0.0f64;
    let mut i = 0;
    while i < sorted.len() {
        // Step over ties so the empirical CDF jumps once per distinct value.
        let x = sorted[i];
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == x {
            j += 1;
        }
        let f = cdf(x);
        let below = i as f64 / n;
        let above = (j + 1) as f64 / n;
        sup = sup.max((f - below).abs()).max((above - f).abs());
        i = j + 1;
    }
    Ok(sup)
}

/// CDF of the exponential law with the given rate.
pub fn exponential_cdf(rate: f64) -> impl Fn(f64) -> f64 {
    move |t| if t <= 0.0 { 0.0 } else { 1.0 - (-rate * t).exp() }
}

/// CDF of the uniform law on `[a, b]`.
pub fn uniform_cdf(a: f64, b: f64) -> impl Fn(f64) -> f64 {
    move |x| ((x - a) / (b - a)).clamp(0.0, 1.0)
}
