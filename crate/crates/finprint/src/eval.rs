//! Verification metrics over labeled embeddings.
//!
//! Verification asks: given two images, are they the same individual? With
//! unit-norm embeddings the L2 distance between any two lies in `[0, 2]`,
//! and a pair is predicted "same" when its distance is at or below a
//! threshold. Sweeping the threshold yields the ROC curve; the area under
//! it is computed exactly as a rank statistic (Mann-Whitney) with the usual
//! half-credit for ties, which matches trapezoidal integration over all
//! distinct thresholds.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Pairwise distances split into same-identity (positive) and
/// cross-identity (negative) pairs.
#[derive(Debug, Clone, Default)]
pub struct PairScores {
    pub positives: Vec<f64>,
    pub negatives: Vec<f64>,
}

/// One point of a threshold sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

/// Distance statistics plus the full pairwise matrix.
#[derive(Debug, Clone)]
pub struct DistanceReport {
    pub intra_mean: f64,
    pub inter_mean: f64,
    /// `inter_mean / intra_mean`; `f64::INFINITY` when `intra_mean` is zero.
    pub ratio: f64,
    pub matrix: Array2<f64>,
}

/// The full evaluation bundle for one embedding set.
#[derive(Debug, Clone)]
pub struct RocReport {
    pub points: Vec<RocPoint>,
    pub auc: f64,
    /// TPR at each requested FPR operating point.
    pub tpr_at_fpr: BTreeMap<String, f64>,
    pub intra_mean: f64,
    pub inter_mean: f64,
    pub ratio: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Distances for all unordered pairs, split by whether the identities match.
///
/// Errors when fewer than two identities are present (no negative pairs) or
/// no identity has two samples (no positive pairs).
pub fn pair_distances(embeddings: ArrayView2<f64>, identities: &[u32]) -> Result<PairScores> {
    let n = embeddings.nrows();
    if n != identities.len() {
        return Err(Error::Contract(format!(
            "{} embeddings but {} identity labels",
            n,
            identities.len()
        )));
    }
    let distinct: std::collections::HashSet<u32> = identities.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::Invalid(
            "need at least two identities to form negative pairs".into(),
        ));
    }
    let rows: Vec<&[f64]> = (0..n)
        .map(|i| embeddings.row(i).to_slice().expect("contiguous embedding row"))
        .collect();
    // Row-parallel candidate: each (i, j) pair visited once, i < j, in a
    // fixed order so downstream sums are reproducible.
    let mut scores = PairScores::default();
    for i in 0..n {
        for j in (i + 1)..n {
            let d = l2(rows[i], rows[j]);
            if identities[i] == identities[j] {
                scores.positives.push(d);
            } else {
                scores.negatives.push(d);
            }
        }
    }
    if scores.positives.is_empty() {
        return Err(Error::Invalid(
            "no identity has two samples; cannot form positive pairs".into(),
        ));
    }
    Ok(scores)
}

/// Sweep thresholds (ascending): a pair is predicted same iff `d <= t`.
pub fn roc_sweep(s: &PairScores, thresholds: &[f64]) -> Result<Vec<RocPoint>> {
    if s.positives.is_empty() || s.negatives.is_empty() {
        return Err(Error::Invalid("empty score list in roc_sweep".into()));
    }
    if thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Contract("thresholds must be sorted ascending".into()));
    }
    let np = s.positives.len() as f64;
    let nn = s.negatives.len() as f64;
    Ok(thresholds
        .iter()
        .map(|&t| {
            let tp = s.positives.iter().filter(|&&d| d <= t).count() as f64;
            let fp = s.negatives.iter().filter(|&&d| d <= t).count() as f64;
            RocPoint {
                threshold: t,
                tpr: tp / np,
                fpr: fp / nn,
            }
        })
        .collect())
}

/// Paper-parity sweep grid: `[0.0, 2.0]` in steps of 0.2.
pub fn default_thresholds() -> Vec<f64> {
    (0..=10).map(|i| i as f64 * 0.2).collect()
}

/// Exact rank-based AUC treating lower distance as "more positive":
/// `P(d_pos < d_neg) + 0.5 * P(d_pos == d_neg)`.
pub fn auc(s: &PairScores) -> Result<f64> {
    if s.positives.is_empty() || s.negatives.is_empty() {
        return Err(Error::Invalid("empty score list in auc".into()));
    }
    let mut pos = s.positives.clone();
    let mut neg = s.negatives.clone();
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);

    // For each negative, count positives strictly below and tied.
    let mut wins = 0f64;
    let mut lo = 0usize; // positives strictly below neg[k]
    let mut hi = 0usize; // positives at or below neg[k]
    for &v in &neg {
        while lo < pos.len() && pos[lo] < v {
            lo += 1;
        }
        while hi < pos.len() && pos[hi] <= v {
            hi += 1;
        }
        wins += lo as f64 + 0.5 * (hi - lo) as f64;
    }
    Ok(wins / (pos.len() as f64 * neg.len() as f64))
}

/// TPR at the largest threshold whose FPR stays at or below `target_fpr`.
///
/// Candidate thresholds are the distinct negative distances (step-function
/// convention, no interpolation). When even the smallest negative distance
/// overshoots the target, the operating point degrades to "just below the
/// smallest negative": the fraction of positives strictly below it.
pub fn tpr_at_fpr(s: &PairScores, target_fpr: f64) -> Result<f64> {
    if s.positives.is_empty() || s.negatives.is_empty() {
        return Err(Error::Invalid("empty score list in tpr_at_fpr".into()));
    }
    if !(target_fpr > 0.0 && target_fpr < 1.0) {
        return Err(Error::Contract(format!(
            "target_fpr must lie in (0, 1), got {target_fpr}"
        )));
    }
    let mut neg = s.negatives.clone();
    neg.sort_by(f64::total_cmp);
    let nn = neg.len() as f64;
    let np = s.positives.len() as f64;

    // Walk distinct negative values ascending; keep the last one admissible.
    let mut best: Option<f64> = None;
    let mut k = 0usize;
    while k < neg.len() {
        let v = neg[k];
        let mut at_or_below = k + 1;
        while at_or_below < neg.len() && neg[at_or_below] == v {
            at_or_below += 1;
        }
        if at_or_below as f64 / nn <= target_fpr {
            best = Some(v);
        } else {
            break;
        }
        k = at_or_below;
    }
    match best {
        Some(t) => Ok(s.positives.iter().filter(|&&d| d <= t).count() as f64 / np),
        None => {
            let min_neg = neg[0];
            Ok(s.positives.iter().filter(|&&d| d < min_neg).count() as f64 / np)
        }
    }
}

/// Mean same-identity and cross-identity distances plus the full symmetric
/// distance matrix (zero diagonal).
pub fn distance_report(embeddings: ArrayView2<f64>, identities: &[u32]) -> Result<DistanceReport> {
    let n = embeddings.nrows();
    if n != identities.len() {
        return Err(Error::Contract(format!(
            "{} embeddings but {} identity labels",
            n,
            identities.len()
        )));
    }
    let scores = pair_distances(embeddings, identities)?;
    let rows: Vec<&[f64]> = (0..n)
        .map(|i| embeddings.row(i).to_slice().expect("contiguous embedding row"))
        .collect();
    let mut matrix = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let d = l2(rows[i], rows[j]);
            matrix[(i, j)] = d;
            matrix[(j, i)] = d;
        }
    }
    let intra_mean = scores.positives.iter().sum::<f64>() / scores.positives.len() as f64;
    let inter_mean = scores.negatives.iter().sum::<f64>() / scores.negatives.len() as f64;
    let ratio = if intra_mean == 0.0 {
        f64::INFINITY
    } else {
        inter_mean / intra_mean
    };
    Ok(DistanceReport {
        intra_mean,
        inter_mean,
        ratio,
        matrix,
    })
}

/// Project embeddings onto their top-2 principal components.
///
/// Mean-centered PCA with a deterministic sign convention: each axis is
/// flipped so its largest-magnitude loading is positive. Zero-variance axes
/// project to zeros.
pub fn project_2d(embeddings: ArrayView2<f64>) -> Result<Array2<f64>> {
    let n = embeddings.nrows();
    let d = embeddings.ncols();
    if n < 3 {
        return Err(Error::Invalid(format!(
            "need at least 3 points for a 2-D projection, got {n}"
        )));
    }
    let mean: Vec<f64> = (0..d)
        .map(|j| embeddings.column(j).sum() / n as f64)
        .collect();
    let mut centered = embeddings.to_owned();
    for mut row in centered.rows_mut() {
        for (v, m) in row.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    // Covariance (unbiased) as a nalgebra matrix for the eigendecomposition.
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for a in 0..d {
        for b in a..d {
            let mut acc = 0.0;
            for i in 0..n {
                acc += centered[(i, a)] * centered[(i, b)];
            }
            let c = acc / (n as f64 - 1.0);
            cov[(a, b)] = c;
            cov[(b, a)] = c;
        }
    }
    let eig = SymmetricEigen::new(cov);
    // Top-2 eigenpairs by eigenvalue.
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let total_var: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let tiny = total_var * 1e-12;

    let mut out = Array2::zeros((n, 2));
    for (axis, &k) in order.iter().take(2).enumerate() {
        if eig.eigenvalues[k] <= tiny {
            continue; // zero-variance axis: leave zeros
        }
        let col = eig.eigenvectors.column(k);
        // Sign convention: largest-magnitude loading positive.
        let mut arg = 0usize;
        for i in 1..d {
            if col[i].abs() > col[arg].abs() {
                arg = i;
            }
        }
        let sign = if col[arg] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..d {
                acc += centered[(i, j)] * col[j];
            }
            out[(i, axis)] = acc * sign;
        }
    }
    Ok(out)
}

/// Run the full evaluation: sweep, exact AUC, requested operating points,
/// and distance statistics.
pub fn evaluate(
    embeddings: ArrayView2<f64>,
    identities: &[u32],
    thresholds: &[f64],
    fpr_targets: &[f64],
) -> Result<RocReport> {
    let scores = pair_distances(embeddings, identities)?;
    let points = roc_sweep(&scores, thresholds)?;
    let auc_value = auc(&scores)?;
    let mut tprs = BTreeMap::new();
    for &t in fpr_targets {
        tprs.insert(format!("{t}"), tpr_at_fpr(&scores, t)?);
    }
    let report = distance_report(embeddings, identities)?;
    Ok(RocReport {
        points,
        auc: auc_value,
        tpr_at_fpr: tprs,
        intra_mean: report.intra_mean,
        inter_mean: report.inter_mean,
        ratio: report.ratio,
        n_pos: scores.positives.len(),
        n_neg: scores.negatives.len(),
    })
}
