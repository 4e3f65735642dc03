//! Classification and OOD-detection metrics, plus the Friedman test used for
//! multi-method comparisons.

use crate::real::{real, Real};
use crate::{Error, Result};

/// Mean accuracy with a 95% confidence half-width (`1.96 * sd / sqrt(n)`,
/// sample standard deviation). A single observation has half-width zero.
pub fn accuracy_ci<T: Real>(accs: &[T]) -> Result<(T, T)> {
    if accs.is_empty() {
        return Err(Error::EmptyList);
    }
    let n = real::<T>(accs.len() as f64);
    let mean = accs.iter().copied().sum::<T>() / n;
    if accs.len() == 1 {
        return Ok((mean, T::zero()));
    }
    let var = accs
        .iter()
        .map(|&a| (a - mean) * (a - mean))
        .sum::<T>()
        / (n - T::one());
    let half = real::<T>(1.96) * var.sqrt() / n.sqrt();
    Ok((mean, half))
}

/// False-positive rate on OOD scores at the threshold admitting at least 95%
/// of the ID scores (`score >= threshold` predicts ID). The threshold is the
/// largest such value, i.e. the `ceil(0.95 n)`-th largest ID score.
pub fn fpr_at_95_tpr<T: Real>(id_scores: &[T], ood_scores: &[T]) -> Result<T> {
    if id_scores.is_empty() || ood_scores.is_empty() {
        return Err(Error::EmptyList);
    }
    let mut sorted = id_scores.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    // ceil(0.95 * n) in exact integer arithmetic.
    let needed = (19 * sorted.len()).div_ceil(20);
    let threshold = sorted[needed - 1];
    let hits = ood_scores.iter().filter(|&&s| s >= threshold).count();
    Ok(real::<T>(hits as f64) / real::<T>(ood_scores.len() as f64))
}

/// Area under the ROC curve via midranks; exactly the pairwise statistic
/// `(#{id > ood} + 0.5 #ties) / (|ID| * |OOD|)`.
pub fn auroc<T: Real>(id_scores: &[T], ood_scores: &[T]) -> Result<T> {
    if id_scores.is_empty() || ood_scores.is_empty() {
        return Err(Error::EmptyList);
    }
    let mut all: Vec<(T, bool)> = id_scores
        .iter()
        .map(|&s| (s, true))
        .chain(ood_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
    let mut rank_sum_id = 0.0f64;
    let mut i = 0usize;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // Midrank of the tie group [i, j), 1-based ranks.
        let midrank = (i + 1 + j) as f64 / 2.0;
        for item in &all[i..j] {
            if item.1 {
                rank_sum_id += midrank;
            }
        }
        i = j;
    }
    let n_id = id_scores.len() as f64;
    let n_ood = ood_scores.len() as f64;
    let u = rank_sum_id - n_id * (n_id + 1.0) / 2.0;
    Ok(real::<T>(u / (n_id * n_ood)))
}

/// Friedman statistics from pre-averaged ranks of `k` methods over `n`
/// datasets:
///
/// `chi2 = 12n/(k(k+1)) * (sum r_j^2 - k(k+1)^2/4)` and
/// `F = (n-1) chi2 / (n(k-1) - chi2)`.
///
/// The rank sum must equal `k(k+1)/2` (within 1e-6). A perfect consensus
/// ranking drives the F denominator to zero; that returns infinity.
pub fn friedman(avg_ranks: &[f64], n: usize) -> Result<(f64, f64)> {
    let k = avg_ranks.len();
    if k < 2 || n < 2 {
        return Err(Error::ConfigInvalid(format!(
            "need k >= 2 methods and n >= 2 datasets, got k={k} n={n}"
        )));
    }
    let expected = (k * (k + 1)) as f64 / 2.0;
    let got: f64 = avg_ranks.iter().sum();
    if (got - expected).abs() > 1e-6 {
        return Err(Error::RankSumInvalid { got, expected });
    }
    let nf = n as f64;
    let kf = k as f64;
    let sum_sq: f64 = avg_ranks.iter().map(|r| r * r).sum();
    let chi2 = 12.0 * nf / (kf * (kf + 1.0)) * (sum_sq - kf * (kf + 1.0) * (kf + 1.0) / 4.0);
    let denom = nf * (kf - 1.0) - chi2;
    let ff = if denom.abs() < 1e-12 {
        f64::INFINITY
    } else {
        (nf - 1.0) * chi2 / denom
    };
    Ok((chi2, ff))
}

/// Friedman statistics from a full `n x k` rank matrix (one row per dataset);
/// column means are taken first.
pub fn friedman_from_matrix(ranks: &[Vec<f64>]) -> Result<(f64, f64)> {
    let n = ranks.len();
    if n < 2 {
        return Err(Error::ConfigInvalid(format!(
            "need n >= 2 dataset rows, got {n}"
        )));
    }
    let k = ranks[0].len();
    for row in ranks {
        if row.len() != k {
            return Err(Error::DimensionMismatch {
                left: row.len(),
                right: k,
            });
        }
    }
    let avg: Vec<f64> = (0..k)
        .map(|j| ranks.iter().map(|row| row[j]).sum::<f64>() / n as f64)
        .collect();
    friedman(&avg, n)
}

/// One-sided exact sign test: `P(X >= wins)` for `X ~ Binomial(trials, 1/2)`.
/// Ties are expected to be dropped by the caller.
pub fn sign_test_p(wins: usize, trials: usize) -> f64 {
    if trials == 0 {
        return 1.0;
    }
    if wins > trials {
        return 0.0;
    }
    // pmf(0) = 0.5^trials, pmf(i+1) = pmf(i) * (n-i)/(i+1)
    let mut pmf = 0.5f64.powi(trials as i32);
    let mut tail = 0.0;
    for i in 0..=trials {
        if i >= wins {
            tail += pmf;
        }
        if i < trials {
            pmf *= (trials - i) as f64 / (i + 1) as f64;
        }
    }
    tail.min(1.0)
}
