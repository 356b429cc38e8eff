use std::cmp::Ordering;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;

/// A metric value, or a marker that the metric is undefined for the input
/// (constant scores, a single class).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    Value(f64),
    Degenerate,
}

impl Statistic {
    pub fn value(self) -> Option<f64> {
        match self {
            Statistic::Value(v) => Some(v),
            Statistic::Degenerate => None,
        }
    }
}

fn check_finite(op: &'static str, xs: &[f64]) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid(op, "non-finite input"))
    }
}

fn check_len(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: vec![a],
            rhs: vec![b],
        })
    }
}

/// Mean Euclidean distance over valid landmarks, per frame, in mm.
/// Every axis before the trailing `[L, 3]` is a frame axis.
pub fn frame_error<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>, validity: &[bool]) -> Result<Vec<f64>> {
    let l = validity.len();
    let shape = pred.shape();
    if shape != target.shape() || shape.len() < 2 || shape[shape.len() - 2..] != [l, 3] {
        return Err(Error::ShapeMismatch {
            op: "frame_error",
            lhs: shape.to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let valid = validity.iter().filter(|&&v| v).count();
    if valid == 0 {
        return Err(Error::NoValidLandmarks { op: "frame_error" });
    }
    Ok(pred
        .data()
        .chunks(3 * l)
        .zip(target.data().chunks(3 * l))
        .map(|(p, t)| {
            let sum: f64 = p
                .chunks(3)
                .zip(t.chunks(3))
                .zip(validity)
                .filter(|(_, &v)| v)
                .map(|((a, b), _)| {
                    a.iter()
                        .zip(b)
                        .map(|(x, y)| (*x - *y).as_f64().powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .sum();
            1000.0 * sum / valid as f64
        })
        .collect())
}

/// 1-based ranks, ties share the average of the ranks they span.
pub fn mid_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Statistic {
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
        return Statistic::Degenerate;
    }
    Statistic::Value((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation: Pearson correlation of mid-ranks.
pub fn spearman(e: &[f64], u: &[f64]) -> Result<Statistic> {
    check_len("spearman", e.len(), u.len())?;
    if e.len() < 3 {
        return Err(Error::invalid(
            "spearman",
            format!("need at least 3 pairs, got {}", e.len()),
        ));
    }
    check_finite("spearman", e)?;
    check_finite("spearman", u)?;
    Ok(pearson(&mid_ranks(e), &mid_ranks(u)))
}

/// One-sided permutation p-value for a positive Spearman correlation:
/// `(1 + #{rho_perm >= rho}) / (1 + permutations)`.
pub fn spearman_permutation_p(e: &[f64], u: &[f64], permutations: usize, seed: u64) -> Result<f64> {
    let Statistic::Value(observed) = spearman(e, u)? else {
        return Err(Error::invalid("spearman_permutation_p", "correlation is degenerate"));
    };
    let re = mid_ranks(e);
    let mut ru = mid_ranks(u);
    let mut g = rng::stream(seed, "permutation", 0);
    let mut hits = 0usize;
    for _ in 0..permutations {
        ru.shuffle(&mut g);
        if pearson(&re, &ru).value().unwrap_or(0.0) >= observed {
            hits += 1;
        }
    }
    Ok((1 + hits) as f64 / (1 + permutations) as f64)
}

fn class_counts(op: &'static str, scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    check_len(op, scores.len(), labels.len())?;
    check_finite(op, scores)?;
    let pos = labels.iter().filter(|&&l| l).count();
    Ok((pos, labels.len() - pos))
}

/// Probability that a positive scores above a negative, ties counting one
/// half (Mann-Whitney).
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<Statistic> {
    let (pos, neg) = class_counts("roc_auc", scores, labels)?;
    if pos == 0 || neg == 0 {
        return Ok(Statistic::Degenerate);
    }
    let ranks = mid_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let p = pos as f64;
    Ok(Statistic::Value((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64)))
}

/// Area under the precision-recall curve by non-interpolated step summation:
/// `sum_k (R_k - R_{k-1}) P_k` over descending distinct score thresholds.
pub fn pr_auc(scores: &[f64], labels: &[bool]) -> Result<Statistic> {
    let (pos, neg) = class_counts("pr_auc", scores, labels)?;
    if pos == 0 || neg == 0 {
        return Ok(Statistic::Degenerate);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut area, mut prev_recall) = (0.0, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if labels[idx[j]] {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let recall = tp as f64 / pos as f64;
        area += (recall - prev_recall) * tp as f64 / (tp + fp) as f64;
        prev_recall = recall;
        i = j;
    }
    Ok(Statistic::Value(area))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskPoint {
    pub coverage: f64,
    pub risk_mm: f64,
}

/// `{0.05, 0.1, 0.2, ..., 1.0}`
pub fn default_coverage_grid() -> Vec<f64> {
    let mut grid = vec![0.05];
    grid.extend((1..=10).map(|i| i as f64 / 10.0));
    grid
}

/// Mean error of the `ceil(c n)` frames with the smallest score, ties broken
/// by frame index. At `c = 1` this is the plain mean in frame order.
pub fn risk_coverage(errors: &[f64], scores: &[f64], grid: &[f64]) -> Result<Vec<RiskPoint>> {
    check_len("risk_coverage", errors.len(), scores.len())?;
    if errors.is_empty() {
        return Err(Error::invalid("risk_coverage", "no frames"));
    }
    check_finite("risk_coverage", scores)?;
    if grid.is_empty() || grid.iter().any(|c| !(*c > 0.0 && *c <= 1.0)) || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid(
            "risk_coverage",
            format!("coverage grid {grid:?} must be strictly increasing in (0, 1]"),
        ));
    }
    let n = errors.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    Ok(grid
        .iter()
        .map(|&c| {
            let k = ((c * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
            let risk_mm = if k == n {
                errors.iter().sum::<f64>() / n as f64
            } else {
                order[..k].iter().map(|&i| errors[i]).sum::<f64>() / k as f64
            };
            RiskPoint { coverage: c, risk_mm }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutlierStats {
    pub threshold_mm: f64,
    pub roc_auc: Statistic,
    pub pr_auc: Statistic,
    pub prevalence: f64,
    pub positives: usize,
}

/// Frames with error above `threshold_mm` are positives; the score ranks
/// them.
pub fn outlier_detection(errors: &[f64], scores: &[f64], threshold_mm: f64) -> Result<OutlierStats> {
    check_len("outlier_detection", errors.len(), scores.len())?;
    if errors.is_empty() {
        return Err(Error::invalid("outlier_detection", "no frames"));
    }
    let labels: Vec<bool> = errors.iter().map(|&e| e > threshold_mm).collect();
    let positives = labels.iter().filter(|&&l| l).count();
    Ok(OutlierStats {
        threshold_mm,
        roc_auc: roc_auc(scores, &labels)?,
        pr_auc: pr_auc(scores, &labels)?,
        prevalence: positives as f64 / labels.len() as f64,
        positives,
    })
}

/// Value at quantile `q` with linear interpolation between order statistics.
pub fn quantile(xs: &[f64], q: f64) -> Result<f64> {
    if xs.is_empty() || !(0.0..=1.0).contains(&q) {
        return Err(Error::invalid("quantile", format!("q {q} on {} values", xs.len())));
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}
