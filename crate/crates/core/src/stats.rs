//! Rank tests, paired t-test, Benjamini-Hochberg adjustment and Pearson
//! correlation.
//!
//! Rank statistics are computed on doubled midranks so that tied ranks stay
//! integral and exact null distributions can be counted by dynamic
//! programming.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{AtlasError, Result};

/// Largest number of non-zero differences evaluated exactly.
pub const SIGNED_RANK_EXACT_MAX_N: usize = 25;
/// Largest `n * m` evaluated exactly for the rank-sum test.
pub const RANK_SUM_EXACT_MAX_PRODUCT: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Alternative {
    #[default]
    TwoSided,
    Greater,
    Less,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Exact,
    Normal,
    StudentT,
    /// No information in the data; p is 1 by convention.
    Degenerate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n: usize,
    pub method: Method,
}

impl TestResult {
    fn degenerate(n: usize) -> Self {
        TestResult {
            statistic: f64::NAN,
            p_value: 1.0,
            n,
            method: Method::Degenerate,
        }
    }
}

/// Midranks (1-based) of `values`, ties sharing their average rank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = rank;
        }
        i = j;
    }
    ranks
}

/// Sizes of tie groups in `values`.
fn tie_sizes(values: &[f64]) -> Vec<usize> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut out = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        out.push(j - i);
        i = j;
    }
    out
}

fn tail_p(lower: f64, upper: f64, alt: Alternative) -> f64 {
    let p = match alt {
        Alternative::TwoSided => 2.0 * lower.min(upper),
        Alternative::Greater => upper,
        Alternative::Less => lower,
    };
    p.clamp(0.0, 1.0)
}

/// Tail probabilities `(P(S <= s), P(S >= s))` of a counted distribution over
/// integer support.
fn tails_from_counts(counts: &[f64], s: usize) -> (f64, f64) {
    let total: f64 = counts.iter().sum();
    let lower: f64 = counts[..=s].iter().sum();
    let upper: f64 = counts[s..].iter().sum();
    (lower / total, upper / total)
}

fn normal_p(z: f64, alt: Alternative) -> f64 {
    let n = Normal::standard();
    match alt {
        Alternative::TwoSided => (2.0 * n.sf(z)).min(1.0),
        Alternative::Greater => n.sf(z),
        Alternative::Less => n.cdf(z),
    }
}

/// Continuity-corrected z for a statistic `d` away from its null mean.
/// Two-sided z is taken on `|d|`, so it is negative (p clipped to 1) when
/// `|d| < 0.5`.
fn corrected_z(d: f64, sd: f64, alt: Alternative) -> f64 {
    match alt {
        Alternative::TwoSided => (d.abs() - 0.5) / sd,
        Alternative::Greater => (d - 0.5) / sd,
        Alternative::Less => (d + 0.5) / sd,
    }
}

/// Wilcoxon signed-rank test of `diffs` against a zero median. Zeros are
/// dropped; the statistic is the sum of positive ranks.
pub fn wilcoxon_signed_rank(diffs: &[f64], alt: Alternative) -> Result<TestResult> {
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(AtlasError::Argument("differences must be finite".into()));
    }
    let nz: Vec<f64> = diffs.iter().copied().filter(|d| *d != 0.0).collect();
    let n = nz.len();
    if n == 0 {
        return Ok(TestResult::degenerate(0));
    }
    let abs: Vec<f64> = nz.iter().map(|d| d.abs()).collect();
    let ranks = midranks(&abs);
    let w_plus: f64 = nz.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();

    if n <= SIGNED_RANK_EXACT_MAX_N {
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let max: usize = doubled.iter().sum();
        let mut counts = vec![0.0f64; max + 1];
        counts[0] = 1.0;
        let mut reach = 0;
        for &r in &doubled {
            for s in (0..=reach).rev() {
                if counts[s] != 0.0 {
                    counts[s + r] += counts[s];
                }
            }
            reach += r;
        }
        let s = (2.0 * w_plus).round() as usize;
        let (lower, upper) = tails_from_counts(&counts, s);
        return Ok(TestResult {
            statistic: w_plus,
            p_value: tail_p(lower, upper, alt),
            n,
            method: Method::Exact,
        });
    }

    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let tie_term: f64 = tie_sizes(&abs)
        .iter()
        .map(|&t| {
            let t = t as f64;
            t * t * t - t
        })
        .sum();
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let p = if var <= 0.0 {
        1.0
    } else {
        normal_p(corrected_z(w_plus - mean, var.sqrt(), alt), alt)
    };
    Ok(TestResult {
        statistic: w_plus,
        p_value: p,
        n,
        method: Method::Normal,
    })
}

/// Mann-Whitney U (Wilcoxon rank-sum) test. The statistic is U for `a`.
pub fn mann_whitney_u(a: &[f64], b: &[f64], alt: Alternative) -> Result<TestResult> {
    if a.is_empty() || b.is_empty() {
        return Err(AtlasError::Argument("both samples must be non-empty".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(AtlasError::Argument("samples must be finite".into()));
    }
    let (n1, n2) = (a.len(), b.len());
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = midranks(&pooled);
    let r1: f64 = ranks[..n1].iter().sum();
    let u = r1 - (n1 * (n1 + 1)) as f64 / 2.0;
    let total = n1 + n2;
    let ties = tie_sizes(&pooled);
    if ties.len() == 1 {
        return Ok(TestResult {
            statistic: u,
            ..TestResult::degenerate(total)
        });
    }

    if n1 * n2 <= RANK_SUM_EXACT_MAX_PRODUCT {
        // counts[k][s]: subsets of size k whose doubled ranks sum to s.
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let max: usize = doubled.iter().sum();
        let mut counts = vec![vec![0.0f64; max + 1]; n1 + 1];
        counts[0][0] = 1.0;
        for &r in &doubled {
            for k in (1..=n1).rev() {
                let (prev, cur) = counts.split_at_mut(k);
                for s in (r..=max).rev() {
                    let c = prev[k - 1][s - r];
                    if c != 0.0 {
                        cur[0][s] += c;
                    }
                }
            }
        }
        let s = (2.0 * r1).round() as usize;
        let (lower, upper) = tails_from_counts(&counts[n1], s);
        return Ok(TestResult {
            statistic: u,
            p_value: tail_p(lower, upper, alt),
            n: total,
            method: Method::Exact,
        });
    }

    let (f1, f2, nf) = (n1 as f64, n2 as f64, total as f64);
    let tie_term: f64 = ties
        .iter()
        .map(|&t| {
            let t = t as f64;
            t * t * t - t
        })
        .sum();
    let var = f1 * f2 / 12.0 * ((nf + 1.0) - tie_term / (nf * (nf - 1.0)));
    let z = corrected_z(u - f1 * f2 / 2.0, var.sqrt(), alt);
    Ok(TestResult {
        statistic: u,
        p_value: normal_p(z, alt),
        n: total,
        method: Method::Normal,
    })
}

/// Paired t-test on `a - b` with `n - 1` degrees of freedom.
pub fn paired_t(a: &[f64], b: &[f64], alt: Alternative) -> Result<TestResult> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(AtlasError::Argument(
            "paired samples need equal lengths of at least 2".into(),
        ));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var <= 0.0 || !var.is_finite() {
        return Err(AtlasError::Degenerate("differences have zero variance".into()));
    }
    let t = mean / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| AtlasError::Argument(e.to_string()))?;
    let p = match alt {
        Alternative::TwoSided => 2.0 * dist.sf(t.abs()),
        Alternative::Greater => dist.sf(t),
        Alternative::Less => dist.cdf(t),
    };
    Ok(TestResult {
        statistic: t,
        p_value: p.clamp(0.0, 1.0),
        n: d.len(),
        method: Method::StudentT,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdrResult {
    pub raw: Vec<f64>,
    pub adjusted: Vec<f64>,
    pub rejected: Vec<bool>,
}

/// Benjamini-Hochberg step-up adjustment; `rejected` uses level `q`.
pub fn bh_fdr(p: &[f64], q: f64) -> Result<FdrResult> {
    if let Some(bad) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(AtlasError::Argument(format!("p value {bad} outside [0, 1]")));
    }
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let mut adjusted = vec![0.0; m];
    let mut running = 1.0f64;
    for (pos, &i) in order.iter().enumerate().rev() {
        running = running.min(p[i] * m as f64 / (pos + 1) as f64);
        adjusted[i] = running.min(1.0).max(p[i]);
    }
    let rejected = adjusted.iter().map(|a| *a <= q).collect();
    Ok(FdrResult {
        raw: p.to_vec(),
        adjusted,
        rejected,
    })
}

/// Pearson product-moment correlation on centered data.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(AtlasError::Argument(
            "pearson needs two equal-length samples of at least 2".into(),
        ));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(AtlasError::Degenerate("zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}
