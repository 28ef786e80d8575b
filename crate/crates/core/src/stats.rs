//! Wilcoxon signed-rank test (exact for small samples) and Wilson score
//! intervals for proportions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::par::Exec;

/// Largest effective sample size for which the exact null is enumerated.
pub const EXACT_MAX_N: usize = 20;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("all differences are zero; the signed-rank test is undefined")]
    AllZero,
    #[error("differences contain a non-finite value")]
    NonFinite,
    #[error("proportion needs total >= 1")]
    EmptyTotal,
    #[error("count {count} exceeds total {total}")]
    CountExceedsTotal { count: u64, total: u64 },
    #[error("confidence level must be in (0, 1), got {0}")]
    BadLevel(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    /// Differences tend to be positive.
    Greater,
    TwoSided,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestMethod {
    Exact,
    NormalApprox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Sum of ranks of the positive differences.
    pub statistic: f64,
    pub p_value: f64,
    /// Pairs left after dropping zero differences.
    pub n_effective: usize,
    pub method: TestMethod,
    pub alternative: Alternative,
    pub zeros_dropped: usize,
    /// Whether any absolute differences were tied (average ranks used).
    pub ties: bool,
}

/// Average ranks of `|d|`, doubled so they stay integral (1-based).
pub(crate) fn doubled_ranks(abs: &[f64]) -> (Vec<u64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..abs.len()).collect();
    order.sort_by(|&a, &b| abs[a].total_cmp(&abs[b]));
    let mut ranks = vec![0u64; abs.len()];
    let mut tie_sizes = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && abs[order[j + 1]] == abs[order[i]] {
            j += 1;
        }
        // positions i..=j (0-based) share rank ((i+1)+(j+1))/2
        let doubled = (i + 1 + j + 1) as u64;
        for &k in &order[i..=j] {
            ranks[k] = doubled;
        }
        tie_sizes.push(j - i + 1);
        i = j + 1;
    }
    (ranks, tie_sizes)
}

/// Counts sign assignments whose doubled positive-rank sum is `>=` and `<=`
/// the observed value, by enumerating all `2^n` assignments.
pub fn exact_tail_counts(doubled: &[u64], observed: u64, exec: Exec) -> (u64, u64) {
    let n = doubled.len();
    assert!(n <= 32, "exact enumeration limited to 32 ranks");
    let low_bits = n.min(12);
    let high_count = 1u64 << (n - low_bits);
    let (low, high) = doubled.split_at(low_bits);
    let counts = exec.map_range(0..high_count, |h| {
        let base: u64 = high
            .iter()
            .enumerate()
            .filter(|(b, _)| h >> b & 1 == 1)
            .map(|(_, r)| r)
            .sum();
        let (mut ge, mut le) = (0u64, 0u64);
        // Gray-code walk over the low bits
        let mut sum = base;
        let mut gray = 0u64;
        for step in 0..(1u64 << low_bits) {
            if step > 0 {
                let flip = step.trailing_zeros() as usize;
                gray ^= 1 << flip;
                if gray >> flip & 1 == 1 {
                    sum += low[flip];
                } else {
                    sum -= low[flip];
                }
            }
            if sum >= observed {
                ge += 1;
            }
            if sum <= observed {
                le += 1;
            }
        }
        (ge, le)
    });
    counts
        .into_iter()
        .fold((0, 0), |(a, b), (x, y)| (a + x, b + y))
}

pub fn wilcoxon_signed_rank(
    differences: &[f64],
    alternative: Alternative,
) -> Result<WilcoxonResult, StatsError> {
    wilcoxon_signed_rank_with(differences, alternative, Exec::default())
}

pub fn wilcoxon_signed_rank_with(
    differences: &[f64],
    alternative: Alternative,
    exec: Exec,
) -> Result<WilcoxonResult, StatsError> {
    if differences.iter().any(|d| !d.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let nonzero: Vec<f64> = differences.iter().copied().filter(|d| *d != 0.0).collect();
    let zeros_dropped = differences.len() - nonzero.len();
    if nonzero.is_empty() {
        return Err(StatsError::AllZero);
    }
    let n = nonzero.len();
    let abs: Vec<f64> = nonzero.iter().map(|d| d.abs()).collect();
    let (doubled, tie_sizes) = doubled_ranks(&abs);
    let observed: u64 = doubled
        .iter()
        .zip(&nonzero)
        .filter(|(_, d)| **d > 0.0)
        .map(|(r, _)| r)
        .sum();
    let statistic = observed as f64 / 2.0;
    let ties = tie_sizes.iter().any(|&t| t > 1);

    let (p_value, method) = if n <= EXACT_MAX_N {
        let (ge, le) = exact_tail_counts(&doubled, observed, exec);
        let total = (1u64 << n) as f64;
        let p = match alternative {
            Alternative::Greater => ge as f64 / total,
            Alternative::TwoSided => (2.0 * ge.min(le) as f64 / total).min(1.0),
        };
        (p, TestMethod::Exact)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let tie_term: f64 = tie_sizes
            .iter()
            .map(|&t| {
                let t = t as f64;
                t * t * t - t
            })
            .sum::<f64>()
            / 48.0;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term;
        let sd = var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        let p = match alternative {
            Alternative::Greater => {
                let z = (statistic - mean - 0.5) / sd;
                1.0 - normal.cdf(z)
            }
            Alternative::TwoSided => {
                let z = ((statistic - mean).abs() - 0.5).max(0.0) / sd;
                (2.0 * (1.0 - normal.cdf(z))).min(1.0)
            }
        };
        (p.clamp(0.0, 1.0), TestMethod::NormalApprox)
    };

    Ok(WilcoxonResult {
        statistic,
        p_value,
        n_effective: n,
        method,
        alternative,
        zeros_dropped,
        ties,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProportionCI {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    pub count: u64,
    pub total: u64,
}

impl ProportionCI {
    pub fn half_width(&self) -> f64 {
        (self.upper - self.lower) / 2.0
    }

    pub fn contains(&self, p: f64) -> bool {
        self.lower <= p && p <= self.upper
    }
}

fn z_for_level(level: f64) -> Result<f64, StatsError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(StatsError::BadLevel(level));
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(normal.inverse_cdf(0.5 + level / 2.0))
}

/// Wilson score interval.
pub fn proportion_ci(count: u64, total: u64, level: f64) -> Result<ProportionCI, StatsError> {
    if total == 0 {
        return Err(StatsError::EmptyTotal);
    }
    if count > total {
        return Err(StatsError::CountExceedsTotal { count, total });
    }
    let z = z_for_level(level)?;
    let n = total as f64;
    let p = count as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z / denom * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    let mut lower = (center - half).max(0.0);
    let mut upper = (center + half).min(1.0);
    if count == 0 {
        lower = 0.0;
    }
    if count == total {
        upper = 1.0;
    }
    Ok(ProportionCI {
        point: p,
        lower: lower.min(p),
        upper: upper.max(p),
        level,
        count,
        total,
    })
}

/// Fraction of simulated Binomial(n, p) draws whose Wilson interval covers `p`.
///
/// Each trial has its own seeded stream, so the result is the same in every
/// execution mode.
pub fn wilson_coverage(p: f64, n: u64, level: f64, trials: u64, seed: u64, exec: Exec) -> f64 {
    let hits = exec.sum_range(0..trials, |trial| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(trial);
        let k = (0..n).filter(|_| rng.gen::<f64>() < p).count() as u64;
        match proportion_ci(k, n, level) {
            Ok(ci) if ci.contains(p) => 1,
            _ => 0,
        }
    });
    hits as f64 / trials as f64
}
