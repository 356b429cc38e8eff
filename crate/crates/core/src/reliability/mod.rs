//! Frame errors, error/uncertainty agreement, selective prediction and the
//! input-noise sweep.

mod metrics;
mod report;

pub use metrics::{
    default_coverage_grid, frame_error, mid_ranks, outlier_detection, pr_auc, quantile, risk_coverage, roc_auc,
    spearman, spearman_permutation_p, OutlierStats, RiskPoint, Statistic,
};
pub use report::{
    format_sig6, render_risk_coverage_svg, report_csv, risk_coverage_csv, sweep_csv, REPORT_CSV, RISK_COVERAGE_CSV,
    RISK_COVERAGE_SVG, SWEEP_CSV,
};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::ModelParameters;
use crate::rng;
use crate::scalar::Scalar;
use crate::training::Dataset;
use crate::uncertainty::{predict, SamplerConfig, UncertaintyKind, UncertaintySummary};

/// Noise levels of the reference sweep, mm.
pub const DEFAULT_SIGMAS_MM: [f64; 8] = [0.0, 2.5, 5.0, 7.5, 10.0, 15.0, 20.0, 30.0];
pub const DEFAULT_OUTLIER_MM: f64 = 50.0;

fn keypoint_mask(op: &'static str, len: usize, valid: Option<&[bool]>) -> Result<Vec<bool>> {
    if !len.is_multiple_of(3) {
        return Err(Error::invalid(op, format!("{len} values do not form xyz triples")));
    }
    match valid {
        None => Ok(vec![true; len / 3]),
        Some(v) if !v.is_empty() && (len / 3).is_multiple_of(v.len()) => {
            Ok(v.iter().copied().cycle().take(len / 3).collect())
        }
        Some(v) => Err(Error::invalid(
            op,
            format!("{} validity flags for {} keypoints", v.len(), len / 3),
        )),
    }
}

/// Adds i.i.d. `N(0, (sigma_mm / 1000)^2)` to every coordinate of every
/// valid keypoint. `valid` repeats over frames; `None` means all valid.
pub fn degrade_inputs<S: Scalar>(
    keypoints: &Tensor<S>,
    sigma_mm: f64,
    seed: u64,
    valid: Option<&[bool]>,
) -> Result<Tensor<S>> {
    if !(sigma_mm.is_finite() && sigma_mm >= 0.0) {
        return Err(Error::invalid(
            "degrade_inputs",
            format!("sigma {sigma_mm} mm must be >= 0"),
        ));
    }
    let mask = keypoint_mask("degrade_inputs", keypoints.len(), valid)?;
    if sigma_mm == 0.0 {
        return Ok(keypoints.clone());
    }
    let normal = Normal::new(0.0, sigma_mm / 1000.0).expect("finite sigma");
    let mut g = rng::stream(seed, rng::STREAM_NOISE, 0);
    let mut out = keypoints.clone();
    for (xyz, &ok) in out.data_mut().chunks_mut(3).zip(&mask) {
        if ok {
            for v in xyz {
                *v += S::of(normal.sample(&mut g));
            }
        }
    }
    Ok(out)
}

/// Zeroes each keypoint independently with probability `fraction`.
/// Returns the degraded tensor and the per-keypoint validity after dropping.
pub fn drop_keypoints<S: Scalar>(keypoints: &Tensor<S>, fraction: f64, seed: u64) -> Result<(Tensor<S>, Vec<bool>)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid(
            "drop_keypoints",
            format!("fraction {fraction} outside [0, 1]"),
        ));
    }
    let mask = keypoint_mask("drop_keypoints", keypoints.len(), None)?;
    let mut g = rng::stream(seed, "missing", 0);
    let keep: Vec<bool> = mask.iter().map(|_| g.gen::<f64>() >= fraction).collect();
    let mut out = keypoints.clone();
    for (xyz, &k) in out.data_mut().chunks_mut(3).zip(&keep) {
        if !k {
            xyz.fill(S::zero());
        }
    }
    Ok((out, keep))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindReport {
    pub kind: UncertaintyKind,
    pub spearman_rho: Statistic,
    pub outliers: OutlierStats,
    pub curve: Vec<RiskPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityReport {
    pub frames: usize,
    pub mean_error_mm: f64,
    /// The prediction errors are measured against.
    pub error_reference: String,
    pub kinds: Vec<KindReport>,
}

impl ReliabilityReport {
    pub fn kind(&self, kind: UncertaintyKind) -> Option<&KindReport> {
        self.kinds.iter().find(|k| k.kind == kind)
    }
}

/// Scores every kind in `kinds` against the frame errors.
pub fn assess(
    errors: &[f64],
    summary: &UncertaintySummary,
    kinds: &[UncertaintyKind],
    grid: &[f64],
    outlier_mm: f64,
) -> Result<ReliabilityReport> {
    if errors.is_empty() {
        return Err(Error::invalid("assess", "no frames"));
    }
    let kinds = kinds
        .iter()
        .map(|&kind| {
            let u = summary.scores(kind);
            Ok(KindReport {
                kind,
                spearman_rho: spearman(errors, u)?,
                outliers: outlier_detection(errors, u, outlier_mm)?,
                curve: risk_coverage(errors, u, grid)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ReliabilityReport {
        frames: errors.len(),
        mean_error_mm: errors.iter().sum::<f64>() / errors.len() as f64,
        error_reference: "mc_mean".into(),
        kinds,
    })
}

/// Per-frame errors and uncertainty of the MC mean on a dataset.
pub fn score_dataset<S: Scalar>(
    params: &ModelParameters<S>,
    inputs: &Tensor<S>,
    data: &Dataset<S>,
    sampler: &SamplerConfig,
    batch_size: usize,
) -> Result<(Vec<f64>, UncertaintySummary)> {
    let pred = predict(params, inputs, sampler, batch_size)?;
    let errors = frame_error(&pred.mean, &data.targets, &data.validity)?;
    Ok((errors, pred.summary(&data.validity)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    pub kind: UncertaintyKind,
    pub outlier_mm: f64,
    pub batch_size: usize,
    pub noise_seed: u64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            kind: UncertaintyKind::Epi,
            outlier_mm: DEFAULT_OUTLIER_MM,
            batch_size: 32,
            noise_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sigma_mm: f64,
    pub mean_error_mm: f64,
    pub spearman_rho: Statistic,
    pub roc_auc: Statistic,
}

/// Degrade, sample, score for every sigma. Row `i` draws its noise from
/// `derive_seed(noise_seed, "sweep", i)`; every row reuses the same sampler
/// so the sigma = 0 row matches an undegraded evaluation.
pub fn robustness_sweep<S: Scalar>(
    params: &ModelParameters<S>,
    data: &Dataset<S>,
    sigmas_mm: &[f64],
    sampler: &SamplerConfig,
    options: &SweepOptions,
) -> Result<Vec<SweepRow>> {
    if sigmas_mm.is_empty() {
        return Err(Error::invalid("robustness_sweep", "empty sigma grid"));
    }
    sigmas_mm
        .par_iter()
        .enumerate()
        .map(|(i, &sigma_mm)| {
            let seed = rng::derive_seed(options.noise_seed, "sweep", i as u64);
            let noisy = degrade_inputs(&data.inputs, sigma_mm, seed, None)?;
            let (errors, summary) = score_dataset(params, &noisy, data, sampler, options.batch_size)?;
            let u = summary.scores(options.kind);
            Ok(SweepRow {
                sigma_mm,
                mean_error_mm: errors.iter().sum::<f64>() / errors.len() as f64,
                spearman_rho: spearman(&errors, u)?,
                roc_auc: outlier_detection(&errors, u, options.outlier_mm)?.roc_auc,
            })
        })
        .collect()
}
