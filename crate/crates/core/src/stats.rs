//! Rank statistics and the signed-rank test.
//!
//! Kendall's tau is the tie-corrected tau-b, computed in O(n log n) with
//! Knight's merge-sort algorithm. Spearman's rho is Pearson's r over average
//! ranks. Both match SciPy's defaults.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Stratum quantiles reported by default: the top 100%, 50%, ... of
/// explanations by quality.
pub const DEFAULT_QUANTILES: [f64; 6] = [1.0, 0.5, 0.25, 0.1, 0.05, 0.01];

fn check_pair(a: &[f64], b: &[f64], min_len: usize) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < min_len {
        return Err(Error::InsufficientData {
            needed: min_len,
            got: a.len(),
        });
    }
    check_finite(a)?;
    check_finite(b)
}

fn check_finite(v: &[f64]) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::NonFiniteSeries(i)),
        None => Ok(()),
    }
}

fn cmp(a: f64, b: f64) -> std::cmp::Ordering {
    a.partial_cmp(&b).expect("finite values")
}

/// Sum over runs of equal values of `t(t-1)/2`, for a sorted slice.
fn tied_pairs<T: PartialEq>(sorted: impl Iterator<Item = T>) -> u64 {
    let mut total = 0u64;
    let mut run = 0u64;
    let mut prev: Option<T> = None;
    for v in sorted {
        if prev.as_ref() == Some(&v) {
            run += 1;
        } else {
            total += run * run.saturating_sub(1) / 2;
            run = 1;
        }
        prev = Some(v);
    }
    total + run * run.saturating_sub(1) / 2
}

/// Kendall's tau-b.
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b, 2)?;
    let n = a.len();
    let mut pairs: Vec<(f64, f64)> = a.iter().copied().zip(b.iter().copied()).collect();
    pairs.sort_by(|p, q| cmp(p.0, q.0).then(cmp(p.1, q.1)));

    let n0 = (n as u64) * (n as u64 - 1) / 2;
    let tied_a = tied_pairs(pairs.iter().map(|p| p.0));
    let tied_ab = tied_pairs(pairs.iter().copied());

    // Bottom-up merge sort on the second coordinate; every time an element of
    // the right run jumps ahead of remaining left elements, those pairs are
    // discordant.
    let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut buf = vec![0.0; n];
    let mut swaps = 0u64;
    let mut width = 1;
    while width < n {
        let mut start = 0;
        while start < n {
            let mid = (start + width).min(n);
            let end = (start + 2 * width).min(n);
            let (mut i, mut j, mut k) = (start, mid, start);
            while i < mid && j < end {
                if ys[i] <= ys[j] {
                    buf[k] = ys[i];
                    i += 1;
                } else {
                    buf[k] = ys[j];
                    j += 1;
                    swaps += (mid - i) as u64;
                }
                k += 1;
            }
            buf[k..k + (mid - i)].copy_from_slice(&ys[i..mid]);
            k += mid - i;
            buf[k..k + (end - j)].copy_from_slice(&ys[j..end]);
            start = end;
        }
        std::mem::swap(&mut ys, &mut buf);
        width *= 2;
    }
    let tied_b = tied_pairs(ys.iter().copied());

    let denom_a = n0 - tied_a;
    let denom_b = n0 - tied_b;
    if denom_a == 0 || denom_b == 0 {
        return Err(Error::DegenerateCorrelation);
    }
    let numerator = n0 as i128 - tied_a as i128 - tied_b as i128 + tied_ab as i128 - 2 * swaps as i128;
    Ok(numerator as f64 / ((denom_a as f64) * (denom_b as f64)).sqrt())
}

/// 1-based ranks with ties given the average of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let avg = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

/// Pearson product-moment correlation.
pub fn pearson_r(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b, 2)?;
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::DegenerateCorrelation);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman's rho (average ranks for ties).
pub fn spearman_rho(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b, 2)?;
    pearson_r(&average_ranks(a), &average_ranks(b))
}

/// Result of a two-sided Wilcoxon signed-rank test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignedRankTest {
    /// Sum of ranks of positive differences.
    pub w_plus: f64,
    pub n_effective: usize,
    pub z: f64,
    pub p_value: f64,
}

/// Minimum number of non-zero differences for the normal approximation.
pub const WILCOXON_MIN_EFFECTIVE: usize = 5;

/// Two-sided Wilcoxon signed-rank test of paired samples.
///
/// Zero differences are dropped. The p-value uses the normal approximation
/// with tie correction of the variance and a continuity correction.
pub fn wilcoxon_signed_rank_test(a: &[f64], b: &[f64]) -> Result<SignedRankTest> {
    check_pair(a, b, 0)?;
    let diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|&d| d != 0.0)
        .collect();
    let n = diffs.len();
    if n < WILCOXON_MIN_EFFECTIVE {
        return Err(Error::InsufficientData {
            needed: WILCOXON_MIN_EFFECTIVE,
            got: n,
        });
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();

    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut sorted = abs;
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        i = j;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let p_value = erfc(z / std::f64::consts::SQRT_2).clamp(0.0, 1.0);
    Ok(SignedRankTest {
        w_plus,
        n_effective: n,
        z,
        p_value,
    })
}

/// Two-sided p-value of the Wilcoxon signed-rank test.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(wilcoxon_signed_rank_test(a, b)?.p_value)
}

/// Kendall's tau between `q` and `qt` within the best-`quantile` fraction of
/// explanations by `q`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub quantile: f64,
    pub size: usize,
    pub tau: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub skip_reason: Option<String>,
}

/// Indices of the top `quantile` fraction of `q` (descending, ties by index).
pub fn top_fraction(q: &[f64], quantile: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..q.len()).collect();
    order.sort_by(|&i, &j| q[j].total_cmp(&q[i]));
    let size = ((quantile * q.len() as f64) - 1e-9).ceil().max(0.0) as usize;
    order.truncate(size.min(q.len()));
    order
}

pub fn stratified_tau(q: &[f64], qt: &[f64], quantiles: &[f64]) -> Result<Vec<Stratum>> {
    check_pair(q, qt, 0)?;
    quantiles
        .iter()
        .map(|&p| {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::InvalidMetricParam(format!("quantile {p} is outside (0, 1]")));
            }
            let idx = top_fraction(q, p);
            let sq: Vec<f64> = idx.iter().map(|&i| q[i]).collect();
            let sqt: Vec<f64> = idx.iter().map(|&i| qt[i]).collect();
            let (tau, skip_reason) = if idx.len() < 2 {
                (None, Some("stratum has fewer than 2 explanations".to_string()))
            } else {
                match kendall_tau(&sq, &sqt) {
                    Ok(t) => (Some(t), None),
                    Err(Error::DegenerateCorrelation) => {
                        (None, Some("all values tied within stratum".to_string()))
                    }
                    Err(e) => return Err(e),
                }
            };
            Ok(Stratum {
                quantile: p,
                size: idx.len(),
                tau,
                skip_reason,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaCorrelations {
    pub delta_tau: f64,
    pub delta_rho: f64,
}

/// `τ(q, a) − τ(q, b)` and `ρ(q, a) − ρ(q, b)`.
pub fn delta_correlations(q: &[f64], qt_a: &[f64], qt_b: &[f64]) -> Result<DeltaCorrelations> {
    Ok(DeltaCorrelations {
        delta_tau: kendall_tau(q, qt_a)? - kendall_tau(q, qt_b)?,
        delta_rho: spearman_rho(q, qt_a)? - spearman_rho(q, qt_b)?,
    })
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Population standard deviation.
pub fn std_dev(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}
