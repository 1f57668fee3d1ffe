//! Bootstrap percentile intervals, the two-sided McNemar test and the
//! two-sided Mann-Whitney U test.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use statrs::function::factorial::ln_binomial;
use thiserror::Error;

pub const DEFAULT_RESAMPLES: usize = 1000;
pub const MCNEMAR_EXACT_BELOW: u64 = 25;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StatsError {
    #[error("input is empty")]
    EmptyInput,
    #[error("n_resamples must be >= 1")]
    NoResamples,
    #[error("input contains a non-finite value")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub low: f64,
    pub high: f64,
}

/// Mean accumulated around the first value, exact for constant data.
pub fn mean(values: &[f64]) -> f64 {
    let shift = values[0];
    shift + values.iter().map(|v| v - shift).sum::<f64>() / values.len() as f64
}

/// Linear-interpolated quantile of sorted data (R type 7).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// The mean of one resample. Resample `i` draws from its own ChaCha stream,
/// so the result does not depend on execution order.
pub fn resample_mean(values: &[f64], seed: u64, i: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    let n = values.len();
    let shift = values[0];
    let mut sum = 0.0;
    for _ in 0..n {
        sum += values[rng.random_range(0..n)] - shift;
    }
    shift + sum / n as f64
}

/// 95% percentile bootstrap interval for the mean.
pub fn bootstrap_ci(values: &[f64], n_resamples: usize, seed: u64) -> Result<Interval, StatsError> {
    bootstrap_ci_level(values, n_resamples, seed, 0.95)
}

pub fn bootstrap_ci_level(
    values: &[f64],
    n_resamples: usize,
    seed: u64,
    level: f64,
) -> Result<Interval, StatsError> {
    if values.is_empty() {
        return Err(StatsError::EmptyInput);
    }
    if n_resamples == 0 {
        return Err(StatsError::NoResamples);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let mut stats = crate::par::map_range(n_resamples, |i| resample_mean(values, seed, i));
    stats.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    Ok(Interval {
        low: quantile_sorted(&stats, alpha),
        high: quantile_sorted(&stats, 1.0 - alpha),
    })
}

pub fn bootstrap_ci_bool(values: &[bool], n_resamples: usize, seed: u64) -> Result<Interval, StatsError> {
    let v: Vec<f64> = values.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    bootstrap_ci(&v, n_resamples, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McNemarMode {
    Exact,
    Chi2cc,
    /// Exact below [`MCNEMAR_EXACT_BELOW`] discordant pairs, else chi-square.
    Auto,
}

/// Two-sided McNemar p-value from the discordant counts.
pub fn mcnemar_two_sided(b: u64, c: u64, mode: McNemarMode) -> f64 {
    let n = b + c;
    if n == 0 {
        return 1.0;
    }
    let exact = match mode {
        McNemarMode::Exact => true,
        McNemarMode::Chi2cc => false,
        McNemarMode::Auto => n < MCNEMAR_EXACT_BELOW,
    };
    if exact {
        let k = b.min(c);
        let ln_half_n = n as f64 * 0.5f64.ln();
        let tail: f64 = (0..=k).map(|i| (ln_binomial(n, i) + ln_half_n).exp()).sum();
        (2.0 * tail).min(1.0)
    } else {
        let d = (b as f64 - c as f64).abs() - 1.0;
        let chi2 = d.max(0.0).powi(2) / n as f64;
        // Survival function of chi-square with one degree of freedom.
        erfc((chi2 / 2.0).sqrt()).min(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// Number of (x, y) pairs with x > y, ties counting one half.
    pub u: f64,
    pub p_value: f64,
    /// Set when every observation is identical and the variance vanishes.
    pub degenerate: bool,
}

fn midranks(values: &[f64]) -> (Vec<f64>, f64) {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = rank;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    (ranks, tie_term)
}

/// Two-sided Mann-Whitney test with midranks, tie-corrected variance and a
/// continuity correction on the normal approximation.
pub fn mann_whitney_two_sided(xs: &[f64], ys: &[f64]) -> Result<MannWhitney, StatsError> {
    if xs.is_empty() || ys.is_empty() {
        return Err(StatsError::EmptyInput);
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let n1 = xs.len() as f64;
    let n2 = ys.len() as f64;
    let pooled: Vec<f64> = xs.iter().chain(ys).copied().collect();
    let (ranks, tie_term) = midranks(&pooled);
    let r1: f64 = ranks[..xs.len()].iter().sum();
    let u = r1 - n1 * (n1 + 1.0) / 2.0;
    let n = n1 + n2;
    let var = n1 * n2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if var <= 0.0 || !var.is_finite() {
        return Ok(MannWhitney {
            u,
            p_value: 1.0,
            degenerate: true,
        });
    }
    let mu = n1 * n2 / 2.0;
    let z = ((u - mu).abs() - 0.5).max(0.0) / var.sqrt();
    Ok(MannWhitney {
        u,
        p_value: erfc(z / std::f64::consts::SQRT_2).min(1.0),
        degenerate: false,
    })
}
