//! Two-sided Wilcoxon signed-rank test on a vector of paired differences.
//!
//! Zero differences are dropped before ranking (Wilcoxon's procedure) unless
//! Pratt handling is selected, in which case they take part in ranking but
//! not in the signed sums. Tied magnitudes get average ranks. For up to
//! `exact_max_n` non-zero differences the null distribution of W+ is
//! enumerated exactly by dynamic programming over sign assignments (ranks
//! are doubled so tied half-ranks stay integral); beyond that a normal
//! approximation with the tie-corrected variance `sum(r^2) / 4` is used.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

pub const DEFAULT_ALPHA: f64 = 0.05;
pub const EXACT_MAX_N: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroHandling {
    /// Discard zero differences.
    Wilcox,
    /// Rank zeros with the rest, then leave them out of W+ and W-.
    Pratt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PValueMethod {
    Exact,
    Normal,
    /// No non-zero differences.
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonConfig {
    pub alpha: f64,
    pub zero_handling: ZeroHandling,
    /// Magnitudes within this absolute distance are treated as tied; values
    /// this close to zero count as zero.
    pub tolerance: f64,
    pub exact_max_n: usize,
}

impl Default for WilcoxonConfig {
    fn default() -> Self {
        WilcoxonConfig {
            alpha: DEFAULT_ALPHA,
            zero_handling: ZeroHandling::Wilcox,
            tolerance: 1e-9,
            exact_max_n: EXACT_MAX_N,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// min(W+, W-).
    pub statistic: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    /// Number of non-zero differences.
    pub n_effective: usize,
    pub p_value: f64,
    pub significant: bool,
    pub method: PValueMethod,
}

impl WilcoxonResult {
    pub fn is_degenerate(&self) -> bool {
        self.method == PValueMethod::Degenerate
    }
}

pub fn wilcoxon_signed_rank(diffs: &[f64], alpha: f64) -> Result<WilcoxonResult> {
    wilcoxon_with(
        diffs,
        &WilcoxonConfig {
            alpha,
            ..WilcoxonConfig::default()
        },
    )
}

pub fn wilcoxon_with(diffs: &[f64], cfg: &WilcoxonConfig) -> Result<WilcoxonResult> {
    if diffs.is_empty() {
        return Err(Error::InvalidArgument("Wilcoxon test needs at least one difference".into()));
    }
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::InvalidArgument("differences must be finite".into()));
    }
    let tol = cfg.tolerance.max(0.0);
    let is_zero = |d: f64| d.abs() <= tol;

    let mut pool: Vec<f64> = match cfg.zero_handling {
        ZeroHandling::Wilcox => diffs.iter().copied().filter(|d| !is_zero(*d)).collect(),
        ZeroHandling::Pratt => diffs.to_vec(),
    };
    pool.sort_by(|a, b| a.abs().total_cmp(&b.abs()));

    // doubled average ranks; a tie group is anchored at its smallest magnitude
    let mut doubled = vec![0u64; pool.len()];
    let mut start = 0;
    while start < pool.len() {
        let anchor = pool[start].abs();
        let mut end = start + 1;
        while end < pool.len() && pool[end].abs() - anchor <= tol {
            end += 1;
        }
        let r = (start + 1 + end) as u64;
        doubled[start..end].iter_mut().for_each(|x| *x = r);
        start = end;
    }

    let mut ranks = Vec::new();
    let mut w_plus2 = 0u64;
    let mut w_minus2 = 0u64;
    for (d, r) in pool.iter().zip(&doubled) {
        if is_zero(*d) {
            continue;
        }
        ranks.push(*r);
        if *d > 0.0 {
            w_plus2 += r;
        } else {
            w_minus2 += r;
        }
    }
    let n = ranks.len();
    let w_plus = w_plus2 as f64 / 2.0;
    let w_minus = w_minus2 as f64 / 2.0;
    let statistic = w_plus.min(w_minus);

    if n == 0 {
        return Ok(WilcoxonResult {
            statistic,
            w_plus,
            w_minus,
            n_effective: 0,
            p_value: 1.0,
            significant: false,
            method: PValueMethod::Degenerate,
        });
    }

    let (p_value, method) = if n <= cfg.exact_max_n {
        (exact_p(&ranks, w_plus2.min(w_minus2)), PValueMethod::Exact)
    } else {
        (normal_p(&ranks, w_plus2), PValueMethod::Normal)
    };
    Ok(WilcoxonResult {
        statistic,
        w_plus,
        w_minus,
        n_effective: n,
        p_value,
        significant: p_value < cfg.alpha,
        method,
    })
}

/// Two-sided exact p: twice the lower tail at the smaller signed-rank sum.
fn exact_p(doubled_ranks: &[u64], smaller: u64) -> f64 {
    let total: u64 = doubled_ranks.iter().sum();
    let mut counts = vec![0u64; total as usize + 1];
    counts[0] = 1;
    let mut reach = 0usize;
    for &r in doubled_ranks {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if counts[s] != 0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let lower: u64 = counts[..=smaller as usize].iter().sum();
    let all = 2f64.powi(doubled_ranks.len() as i32);
    (2.0 * lower as f64 / all).min(1.0)
}

fn normal_p(doubled_ranks: &[u64], w_plus2: u64) -> f64 {
    let ranks: Vec<f64> = doubled_ranks.iter().map(|&r| r as f64 / 2.0).collect();
    let mean = ranks.iter().sum::<f64>() / 2.0;
    let var = ranks.iter().map(|r| r * r).sum::<f64>() / 4.0;
    let z = (w_plus2 as f64 / 2.0 - mean) / var.sqrt();
    let normal = Normal::standard();
    (2.0 * normal.cdf(-z.abs())).min(1.0)
}
