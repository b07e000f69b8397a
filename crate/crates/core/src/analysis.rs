//! Error rates and paired significance testing.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{invalid, shape, Result};

/// Largest number of nonzero differences for which the exact null
/// distribution is enumerated.
pub const WILCOXON_EXACT_MAX_N: usize = 25;
/// Continuity correction applied to the normal approximation.
pub const WILCOXON_CONTINUITY: f64 = 0.5;
/// Floor on the reference error in [`relative_difference`].
pub const RELATIVE_EPS: f64 = 1e-12;

// Absolute differences within this relative distance share a rank. Error
// rates are ratios of small integers, so differences that are mathematically
// equal can disagree in the last bit.
const TIE_RTOL: f64 = 1e-12;

/// Index of the largest probability; ties go to the higher class, so a
/// two-class prediction of exactly 0.5 counts as class 1.
pub fn predicted_class(probs: &[f64]) -> usize {
    let mut best = 0;
    for (k, &p) in probs.iter().enumerate() {
        if p >= probs[best] {
            best = k;
        }
    }
    best
}

pub fn misclassification_rate(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(shape(format!("{} predictions for {} labels", probs.len(), labels.len())));
    }
    if probs.is_empty() {
        return Err(invalid("no predictions to score"));
    }
    let wrong = probs
        .iter()
        .zip(labels)
        .filter(|(p, &y)| predicted_class(p) != y)
        .count();
    Ok(wrong as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelativeDifference {
    pub value: f64,
    /// The reference error was below [`RELATIVE_EPS`] and was floored.
    pub guarded: bool,
}

/// `(variant - reference) / max(reference, eps)`.
pub fn relative_difference(err_variant: f64, err_reference: f64) -> RelativeDifference {
    let guarded = err_reference < RELATIVE_EPS;
    RelativeDifference {
        value: (err_variant - err_reference) / err_reference.max(RELATIVE_EPS),
        guarded,
    }
}

/// One paired observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pair {
    pub config_id: u64,
    pub err_a: f64,
    pub err_b: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PairedErrors {
    pairs: Vec<Pair>,
}

impl PairedErrors {
    pub fn new(pairs: Vec<Pair>) -> Result<Self> {
        let mut ids: Vec<u64> = pairs.iter().map(|p| p.config_id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(invalid("duplicate config id in paired errors"));
        }
        if let Some(p) = pairs
            .iter()
            .find(|p| !(0.0..=1.0).contains(&p.err_a) || !(0.0..=1.0).contains(&p.err_b))
        {
            return Err(invalid(format!(
                "config {}: error rates must lie in [0, 1]",
                p.config_id
            )));
        }
        Ok(Self { pairs })
    }

    /// Pairs built from unconstrained real differences, for callers that
    /// test something other than error rates.
    pub fn from_differences(diffs: &[f64]) -> Self {
        Self {
            pairs: diffs
                .iter()
                .enumerate()
                .map(|(i, &d)| Pair {
                    config_id: i as u64,
                    err_a: d,
                    err_b: 0.0,
                })
                .collect(),
        }
    }

    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WilcoxonMethod {
    Exact,
    NormalApprox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    pub n_effective: usize,
    /// Smaller of the positive and negative signed-rank sums.
    pub w: f64,
    /// Sum of ranks of positive differences (`err_a > err_b`).
    pub w_plus: f64,
    pub w_minus: f64,
    pub p_two_sided: f64,
    pub method: WilcoxonMethod,
    /// All differences were zero.
    pub degenerate: bool,
}

/// Mid-ranks of `values` (ascending), with near-equal values tied.
fn mid_ranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut tie_sizes = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() {
            let (a, b) = (values[order[start]], values[order[end]]);
            if (b - a).abs() > TIE_RTOL * a.abs().max(b.abs()) {
                break;
            }
            end += 1;
        }
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        tie_sizes.push(end - start);
        start = end;
    }
    (ranks, tie_sizes)
}

/// Two-sided Wilcoxon signed-rank test on `err_a - err_b`.
///
/// Zero differences are dropped. The exact null distribution is used when
/// at most [`WILCOXON_EXACT_MAX_N`] differences remain and their magnitudes
/// are untied; otherwise a normal approximation with tie and continuity
/// corrections.
pub fn wilcoxon_signed_rank(pairs: &PairedErrors) -> Result<WilcoxonResult> {
    if pairs.is_empty() {
        return Err(invalid("wilcoxon test needs at least one pair"));
    }
    let diffs: Vec<f64> = pairs
        .pairs
        .iter()
        .map(|p| p.err_a - p.err_b)
        .filter(|&d| d != 0.0)
        .collect();
    let n = diffs.len();
    if n == 0 {
        return Ok(WilcoxonResult {
            n_effective: 0,
            w: 0.0,
            w_plus: 0.0,
            w_minus: 0.0,
            p_two_sided: 1.0,
            method: WilcoxonMethod::Exact,
            degenerate: true,
        });
    }
    let magnitudes: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let (ranks, tie_sizes) = mid_ranks(&magnitudes);
    let w_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;
    let w = w_plus.min(w_minus);
    let tied = tie_sizes.iter().any(|&t| t > 1);

    let (p, method) = if n <= WILCOXON_EXACT_MAX_N && !tied {
        (exact_p(n, w.round() as usize), WilcoxonMethod::Exact)
    } else {
        let mean = total / 2.0;
        let tie_term: f64 = tie_sizes.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
        let var = (n * (n + 1) * (2 * n + 1)) as f64 / 24.0 - tie_term;
        let p = if var <= 0.0 {
            1.0
        } else {
            let z = ((w - mean).abs() - WILCOXON_CONTINUITY).max(0.0) / var.sqrt();
            erfc(z / std::f64::consts::SQRT_2)
        };
        (p, WilcoxonMethod::NormalApprox)
    };
    Ok(WilcoxonResult {
        n_effective: n,
        w,
        w_plus,
        w_minus,
        p_two_sided: p.clamp(0.0, 1.0),
        method,
        degenerate: false,
    })
}

/// `min(1, 2 P(W+ <= w))` under the null, where W+ is the sum of a uniformly
/// random subset of the ranks `1..=n`.
fn exact_p(n: usize, w: usize) -> f64 {
    let max = n * (n + 1) / 2;
    // counts[s] = number of subsets of {1..k} with rank sum s.
    let mut counts = vec![0u64; max + 1];
    counts[0] = 1;
    for k in 1..=n {
        for s in (k..=max).rev() {
            counts[s] += counts[s - k];
        }
    }
    let tail: u64 = counts[..=w.min(max)].iter().sum();
    (2.0 * tail as f64 / (1u64 << n) as f64).min(1.0)
}

pub fn bonferroni(p: f64, m: usize) -> Result<f64> {
    if m == 0 {
        return Err(invalid("bonferroni correction needs m >= 1"));
    }
    Ok((p * m as f64).min(1.0))
}
