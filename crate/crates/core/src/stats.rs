//! Paired significance testing: the two-sided Wilcoxon signed-rank test.
//!
//! Zero differences are dropped and tied magnitudes share their average rank.
//! Up to [`EXACT_MAX_N`] non-zero pairs the null distribution is computed
//! exactly (conditional on the observed ranks); above that a normal
//! approximation with tie-corrected variance is used.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Largest number of non-zero differences handled by the exact distribution.
pub const EXACT_MAX_N: usize = 12;

/// Minimum number of pairs the test accepts.
pub const MIN_PAIRS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Rank sum of positive differences `a − b`.
    pub w_plus: f64,
    /// Rank sum of negative differences.
    pub w_minus: f64,
    /// Number of non-zero differences that were ranked.
    pub n: usize,
    pub p_value: f64,
    pub exact: bool,
}

impl WilcoxonResult {
    /// The smaller rank sum, the usual reported statistic.
    pub fn statistic(&self) -> f64 {
        self.w_plus.min(self.w_minus)
    }
}

/// Average ranks (1-based) of `values`, ties sharing the mean of their ranks.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

/// Two-sided Wilcoxon signed-rank test of paired scores `a` and `b`.
pub fn wilcoxon_significance(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "wilcoxon",
            format!("{} vs {} paired scores", a.len(), b.len()),
        ));
    }
    if a.len() < MIN_PAIRS {
        return Err(Error::Config(format!(
            "the signed-rank test needs at least {MIN_PAIRS} pairs, got {}",
            a.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("wilcoxon input".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if diffs.is_empty() {
        return Err(Error::UndefinedTest("all paired differences are zero".into()));
    }
    let ranks = average_ranks(&diffs.iter().map(|d| d.abs()).collect::<Vec<_>>());
    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let n = diffs.len();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;
    let t = w_plus.min(w_minus);
    let (p, exact) = if n <= EXACT_MAX_N {
        (exact_lower_tail(&ranks, t), true)
    } else {
        (normal_lower_tail(&ranks, t), false)
    };
    Ok(WilcoxonResult {
        w_plus,
        w_minus,
        n,
        p_value: (2.0 * p).min(1.0),
        exact,
    })
}

/// `P(W⁺ ≤ t)` under the null, by counting sign patterns. Ranks are
/// integers or halves, so doubled ranks index an integer table.
fn exact_lower_tail(ranks: &[f64], t: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    let mut counts = vec![0u64; max + 1];
    counts[0] = 1;
    for &r in &doubled {
        for s in (r..=max).rev() {
            counts[s] += counts[s - r];
        }
    }
    let limit = (2.0 * t).round() as usize;
    let hits: u64 = counts[..=limit.min(max)].iter().sum();
    hits as f64 / (1u64 << ranks.len()) as f64
}

/// Normal approximation of `P(W⁺ ≤ t)` with the tie-corrected variance.
fn normal_lower_tail(ranks: &[f64], t: f64) -> f64 {
    let n = ranks.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut sorted = ranks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    for group in sorted.chunk_by(|x, y| x == y) {
        let g = group.len() as f64;
        tie_term += g * g * g - g;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    let z = (t - mean) / var.sqrt();
    Normal::standard().cdf(z)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_positive_shift_on_six_pairs() {
        let b = [70.0, 71.5, 80.0, 65.0, 90.0, 77.0];
        let a: Vec<f64> = b.iter().map(|v| v + 3.0).collect();
        let r = wilcoxon_significance(&a, &b).unwrap();
        assert_eq!(r.statistic(), 0.0);
        assert_eq!(r.w_plus, 21.0);
        assert!(r.exact);
        assert!((r.p_value - 0.03125).abs() < 1e-15);
    }

    #[test]
    fn identical_scores_are_undefined() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert!(matches!(wilcoxon_significance(&a, &a), Err(Error::UndefinedTest(_))));
    }

    #[test]
    fn too_few_or_unequal_pairs() {
        assert!(wilcoxon_significance(&[1.0; 4], &[0.0; 4]).is_err());
        assert!(wilcoxon_significance(&[1.0; 6], &[0.0; 5]).is_err());
    }

    #[test]
    fn average_ranks_share_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn large_samples_use_the_normal_approximation() {
        let a: Vec<f64> = (0..20)
            .map(|i| i as f64 + if i % 3 == 0 { -0.5 } else { 0.7 })
            .collect();
        let b: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let r = wilcoxon_significance(&a, &b).unwrap();
        assert!(!r.exact);
        assert!(r.p_value > 0.0 && r.p_value < 1.0);
    }
}
