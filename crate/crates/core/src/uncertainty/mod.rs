//! MC-dropout sampling and the epistemic / aleatoric variance split.
//!
//! Pass `m` of a batch draws its dropout masks from
//! `derive_seed(base_seed, "dropout", m)`. Passes run in parallel and are
//! reduced in pass order, so results do not depend on the thread count.

mod dump;

pub use dump::{write_prediction_dump, PREDICTION_MANIFEST};

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::ModelParameters;
use crate::rng;
use crate::scalar::Scalar;

/// How the aleatoric variance is taken from the MC passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AleatoricMode {
    /// Mean of `exp(log_var)` over the M passes.
    #[default]
    Averaged,
    /// `exp(log_var)` of one forward pass with dropout off.
    SinglePass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub num_samples: usize,
    pub dropout_rate: f64,
    pub base_seed: u64,
    pub aleatoric: AleatoricMode,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            num_samples: 50,
            dropout_rate: 0.1,
            base_seed: 0,
            aleatoric: AleatoricMode::Averaged,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_samples < 2 {
            return Err(Error::Config(format!(
                "num_samples {} must be at least 2",
                self.num_samples
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Same sampler with a base seed specific to batch `index`.
    pub fn for_batch(&self, index: u64) -> Self {
        Self {
            base_seed: rng::derive_seed(self.base_seed, "mc.batch", index),
            ..self.clone()
        }
    }
}

/// Stacked MC passes over one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct McSamples<S> {
    /// `[M, B, T, L, 3]`
    pub means: Tensor<S>,
    /// `[M, B, T, L, 3]`, present iff the model is heteroscedastic
    pub log_vars: Option<Tensor<S>>,
}

pub fn mc_sample<S: Scalar>(
    params: &ModelParameters<S>,
    batch: &Tensor<S>,
    sampler: &SamplerConfig,
) -> Result<McSamples<S>> {
    sampler.validate()?;
    let outputs = (0..sampler.num_samples)
        .into_par_iter()
        .map(|m| {
            let seed = rng::derive_seed(sampler.base_seed, rng::STREAM_DROPOUT, m as u64);
            params.forward_with_rate(batch, sampler.dropout_rate, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    let stack = |items: Vec<Tensor<S>>| Tensor::stack(&items);
    let log_vars = if params.config.heteroscedastic {
        Some(stack(
            outputs
                .iter()
                .map(|o| o.log_var.clone().expect("heteroscedastic output"))
                .collect(),
        )?)
    } else {
        None
    };
    Ok(McSamples {
        means: stack(outputs.into_iter().map(|o| o.mean).collect())?,
        log_vars,
    })
}

fn split_leading<S: Scalar>(samples: &Tensor<S>, op: &'static str) -> Result<(usize, usize, Vec<usize>)> {
    let Some((&m, rest)) = samples.shape().split_first() else {
        return Err(Error::invalid(op, "samples need a leading pass axis"));
    };
    if rest.is_empty() {
        return Err(Error::invalid(op, "samples need at least one element axis"));
    }
    Ok((m, rest.iter().product(), rest.to_vec()))
}

/// Sample mean over the leading axis, computed as `s_0 + mean(s_m - s_0)`
/// so identical samples give back `s_0` bit for bit.
pub fn sample_mean<S: Scalar>(samples: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, n, shape) = split_leading(samples, "sample_mean")?;
    let d = samples.data();
    let inv = S::one() / S::of_usize(m);
    let data = (0..n)
        .map(|i| {
            let base = d[i];
            let mut acc = S::zero();
            for k in 1..m {
                acc += d[k * n + i] - base;
            }
            base + acc * inv
        })
        .collect();
    Tensor::new(shape, data)
}

/// Population variance (1/M) over the leading axis, two-pass about the mean.
pub fn epistemic_variance<S: Scalar>(samples: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, n, shape) = split_leading(samples, "epistemic_variance")?;
    if m < 2 {
        return Err(Error::invalid(
            "epistemic_variance",
            format!("need at least 2 samples, got {m}"),
        ));
    }
    let mean = sample_mean(samples)?;
    let d = samples.data();
    let inv = S::one() / S::of_usize(m);
    let data = (0..n)
        .map(|i| {
            let mu = mean.data()[i];
            let mut acc = S::zero();
            for k in 0..m {
                let dev = d[k * n + i] - mu;
                acc += dev * dev;
            }
            acc * inv
        })
        .collect();
    Tensor::new(shape, data)
}

/// Mean of `exp(log_var)` over the leading axis.
pub fn aleatoric_variance<S: Scalar>(log_vars: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, n, shape) = split_leading(log_vars, "aleatoric_variance")?;
    let d = log_vars.data();
    let inv = S::one() / S::of_usize(m);
    let data = (0..n)
        .map(|i| {
            let mut acc = S::zero();
            for k in 0..m {
                acc += d[k * n + i].exp();
            }
            acc * inv
        })
        .collect();
    Tensor::new(shape, data)
}

pub fn total_variance<S: Scalar>(epi: &Tensor<S>, ale: Option<&Tensor<S>>) -> Result<Tensor<S>> {
    let Some(ale) = ale else {
        return Ok(epi.clone());
    };
    if epi.shape() != ale.shape() {
        return Err(Error::ShapeMismatch {
            op: "total_variance",
            lhs: epi.shape().to_vec(),
            rhs: ale.shape().to_vec(),
        });
    }
    let data = epi.data().iter().zip(ale.data()).map(|(&a, &b)| a + b).collect();
    Tensor::new(epi.shape().to_vec(), data)
}

/// Per-frame mean of `variance[.., L, 3]` over valid landmarks and axes.
/// Every leading axis is treated as a frame axis.
pub fn frame_score<S: Scalar>(variance: &Tensor<S>, validity: &[bool]) -> Result<Vec<f64>> {
    let l = validity.len();
    let shape = variance.shape();
    if shape.len() < 2 || shape[shape.len() - 1] != 3 || shape[shape.len() - 2] != l {
        return Err(Error::ShapeMismatch {
            op: "frame_score",
            lhs: shape.to_vec(),
            rhs: vec![l, 3],
        });
    }
    let valid = validity.iter().filter(|&&v| v).count();
    if valid == 0 {
        return Err(Error::NoValidLandmarks { op: "frame_score" });
    }
    let denom = (3 * valid) as f64;
    Ok(variance
        .data()
        .chunks(3 * l)
        .map(|frame| {
            let sum: f64 = frame
                .chunks(3)
                .zip(validity)
                .filter(|(_, &v)| v)
                .flat_map(|(c, _)| c.iter().map(|x| x.as_f64()))
                .sum();
            sum / denom
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum UncertaintyKind {
    #[default]
    Epi,
    Ale,
    Total,
}

impl UncertaintyKind {
    pub const ALL: [UncertaintyKind; 3] = [UncertaintyKind::Epi, UncertaintyKind::Ale, UncertaintyKind::Total];

    pub fn name(self) -> &'static str {
        match self {
            UncertaintyKind::Epi => "epi",
            UncertaintyKind::Ale => "ale",
            UncertaintyKind::Total => "total",
        }
    }
}

impl fmt::Display for UncertaintyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for UncertaintyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "epi" => Ok(Self::Epi),
            "ale" => Ok(Self::Ale),
            "total" => Ok(Self::Total),
            _ => Err(Error::Config(format!(
                "unknown uncertainty kind `{s}` (epi, ale, total)"
            ))),
        }
    }
}

/// Per-frame scores for every kind, frames in clip-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintySummary {
    pub epi: Vec<f64>,
    pub ale: Vec<f64>,
    pub total: Vec<f64>,
    /// Aggregation rule over landmarks and axes.
    pub aggregation: String,
}

impl UncertaintySummary {
    pub fn scores(&self, kind: UncertaintyKind) -> &[f64] {
        match kind {
            UncertaintyKind::Epi => &self.epi,
            UncertaintyKind::Ale => &self.ale,
            UncertaintyKind::Total => &self.total,
        }
    }
}

/// MC predictive statistics for a set of clips.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<S> {
    /// `[N, T, L, 3]`, the MC sample mean
    pub mean: Tensor<S>,
    /// `[N, T, L, 3]`
    pub epi: Tensor<S>,
    /// `[N, T, L, 3]`, zero for a deterministic model
    pub ale: Tensor<S>,
    /// `[N, T, L, 3]`, `epi + ale`
    pub total: Tensor<S>,
}

impl<S: Scalar> Prediction<S> {
    pub fn summary(&self, validity: &[bool]) -> Result<UncertaintySummary> {
        Ok(UncertaintySummary {
            epi: frame_score(&self.epi, validity)?,
            ale: frame_score(&self.ale, validity)?,
            total: frame_score(&self.total, validity)?,
            aggregation: "mean".into(),
        })
    }
}

fn concat<S: Scalar>(parts: Vec<Tensor<S>>) -> Result<Tensor<S>> {
    let first = parts.first().ok_or_else(|| Error::invalid("predict", "no batches"))?;
    let mut shape = first.shape().to_vec();
    shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
    let data = parts.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::new(shape, data)
}

/// MC statistics for `inputs [N, T, 3K]`, processed in chunks of
/// `batch_size` clips. Chunk `b` samples with `sampler.for_batch(b)`.
pub fn predict<S: Scalar>(
    params: &ModelParameters<S>,
    inputs: &Tensor<S>,
    sampler: &SamplerConfig,
    batch_size: usize,
) -> Result<Prediction<S>> {
    sampler.validate()?;
    if inputs.rank() != 3 {
        return Err(Error::invalid(
            "predict",
            format!("inputs must be [N, T, 3K], got {:?}", inputs.shape()),
        ));
    }
    let n = inputs.shape()[0];
    let order: Vec<usize> = (0..n).collect();
    let per: usize = inputs.shape()[1..].iter().product();
    let (mut means, mut epis, mut ales, mut totals) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (b, idx) in order.chunks(batch_size.max(1)).enumerate() {
        let mut shape = inputs.shape().to_vec();
        shape[0] = idx.len();
        let batch = Tensor::new(
            shape,
            inputs.data()[idx[0] * per..(idx[idx.len() - 1] + 1) * per].to_vec(),
        )?;
        let s = mc_sample(params, &batch, &sampler.for_batch(b as u64))?;
        let epi = epistemic_variance(&s.means)?;
        let ale = match (&s.log_vars, sampler.aleatoric) {
            (None, _) => Tensor::zeros(epi.shape().to_vec())?,
            (Some(lv), AleatoricMode::Averaged) => aleatoric_variance(lv)?,
            (Some(_), AleatoricMode::SinglePass) => {
                let out = params.forward_with_rate(&batch, 0.0, 0)?;
                out.log_var.expect("heteroscedastic output").map(|v| v.exp())
            }
        };
        totals.push(total_variance(&epi, Some(&ale))?);
        means.push(sample_mean(&s.means)?);
        epis.push(epi);
        ales.push(ale);
    }
    Ok(Prediction {
        mean: concat(means)?,
        epi: concat(epis)?,
        ale: concat(ales)?,
        total: concat(totals)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_sample_variance() {
        let s = Tensor::new(vec![2, 1], vec![1.0_f64, 3.0]).unwrap();
        assert_eq!(epistemic_variance(&s).unwrap().data(), &[1.0]);
        assert_eq!(sample_mean(&s).unwrap().data(), &[2.0]);
    }

    #[test]
    fn identical_samples_have_exact_mean_and_zero_variance() {
        let x = 0.1_f64 + 0.2;
        let s = Tensor::new(vec![50, 1], vec![x; 50]).unwrap();
        assert_eq!(sample_mean(&s).unwrap().data(), &[x]);
        assert_eq!(epistemic_variance(&s).unwrap().data(), &[0.0]);
    }

    #[test]
    fn frame_score_averages_valid_axes() {
        let v = Tensor::new(vec![1, 2, 3], vec![1.0_f64, 2.0, 3.0, 100.0, 100.0, 100.0]).unwrap();
        assert_eq!(frame_score(&v, &[true, false]).unwrap(), vec![2.0]);
        assert!(frame_score(&v, &[false, false]).is_err());
    }

    #[test]
    fn single_sample_is_rejected() {
        let s = SamplerConfig {
            num_samples: 1,
            ..Default::default()
        };
        assert!(s.validate().is_err());
    }
}
