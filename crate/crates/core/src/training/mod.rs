//! Losses, AdamW, the epoch loop with early stopping, and the warm start
//! from a deterministic baseline to a heteroscedastic model.

mod losses;
mod optim;

pub use losses::{
    acceleration_loss, acceleration_loss_node, angle_loss, angle_loss_node, composite_loss, composite_loss_node,
    gaussian_nll, gaussian_nll_node, mse, mse_node, position_loss, position_loss_node, velocity_loss,
    velocity_loss_node, LossBreakdown, LossWeights, DEGENERATE_SEGMENT,
};
pub use optim::AdamW;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::data::{check_disjoint, MotionSample};
use crate::error::{Error, Result};
use crate::model::{init_log_var_head, Dropout, ModelConfig, ModelParameters, Normalizer};
use crate::rng;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub loss_weights: LossWeights,
    pub seed: u64,
    /// Apply the model's dropout during training steps.
    pub train_dropout: bool,
    /// Fit feature standardisation on the training split when the starting
    /// parameters carry none.
    pub fit_normalizer: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 0.05,
            batch_size: 64,
            max_epochs: 200,
            patience: 10,
            loss_weights: LossWeights::default(),
            seed: 0,
            train_dropout: true,
            fit_normalizer: true,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss_weights.validate()?;
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "learning_rate {} must be >= 0",
                self.learning_rate
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay {} must be >= 0",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config(
                "batch_size, max_epochs and patience must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Clips stacked into model-ready tensors.
#[derive(Debug, Clone)]
pub struct Dataset<S> {
    /// `[N, T, 3K]`, keypoint-major, coordinate-minor per frame.
    pub inputs: Tensor<S>,
    /// `[N, T, L, 3]`
    pub targets: Tensor<S>,
    pub validity: Vec<bool>,
    pub clip_ids: Vec<String>,
    pub subject_ids: Vec<String>,
}

impl<S: Scalar> Dataset<S> {
    pub fn from_samples(samples: &[MotionSample]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::invalid("dataset", "no clips"))?;
        let (t, k, l) = (first.frames(), first.keypoint_count(), first.landmark_count());
        let mut inputs = Vec::with_capacity(samples.len() * t * k * 3);
        let mut targets = Vec::with_capacity(samples.len() * t * l * 3);
        for s in samples {
            s.validate()?;
            if (s.frames(), s.keypoint_count(), s.landmark_count()) != (t, k, l) {
                return Err(Error::ShapeMismatch {
                    op: "dataset",
                    lhs: first.landmarks.shape().to_vec(),
                    rhs: s.landmarks.shape().to_vec(),
                });
            }
            if s.landmark_validity != first.landmark_validity {
                return Err(Error::invalid(
                    "dataset",
                    format!("clip {} has different validity flags", s.clip_id),
                ));
            }
            inputs.extend(s.keypoints.data().iter().map(|&v| S::of(v)));
            targets.extend(s.landmarks.data().iter().map(|&v| S::of(v)));
        }
        let n = samples.len();
        Ok(Self {
            inputs: Tensor::new(vec![n, t, 3 * k], inputs)?,
            targets: Tensor::new(vec![n, t, l, 3], targets)?,
            validity: first.landmark_validity.clone(),
            clip_ids: samples.iter().map(|s| s.clip_id.clone()).collect(),
            subject_ids: samples.iter().map(|s| s.subject_id.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn rows(t: &Tensor<S>, idx: &[usize]) -> Tensor<S> {
        let per: usize = t.shape()[1..].iter().product();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = idx.len();
        Tensor::new(shape, data).expect("batch shape")
    }

    /// Inputs and targets of the clips at `idx`, in that order.
    pub fn batch(&self, idx: &[usize]) -> (Tensor<S>, Tensor<S>) {
        (Self::rows(&self.inputs, idx), Self::rows(&self.targets, idx))
    }
}

/// Consecutive index chunks of at most `size`, the last possibly shorter.
pub fn batches(order: &[usize], size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(size.max(1))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub mpjpe_mm: f64,
}

/// Composite loss (dropout off) and MPJPE over a dataset. The loss is the
/// clip-weighted mean of per-batch losses.
pub fn evaluate<S: Scalar>(
    params: &ModelParameters<S>,
    data: &Dataset<S>,
    triplets: &[[usize; 3]],
    weights: &LossWeights,
    batch_size: usize,
) -> Result<Evaluation> {
    let order: Vec<usize> = (0..data.len()).collect();
    let (mut loss, mut dist, mut count) = (0.0, 0.0, 0usize);
    for idx in batches(&order, batch_size) {
        let (x, y) = data.batch(idx);
        let mut g = Graph::new(false);
        let ids = params.register(&mut g);
        let out = params.forward_nodes(&mut g, &ids, &x, None)?;
        let target = g.constant(y);
        let (_, parts) = composite_loss_node(&mut g, out.mean, out.log_var, target, &data.validity, triplets, weights)?;
        loss += parts.total * idx.len() as f64;
        let pred = g.value(out.mean).data();
        let truth = g.value(target).data();
        for (i, (p, t)) in pred.chunks(3).zip(truth.chunks(3)).enumerate() {
            let l = i % data.validity.len();
            if data.validity[l] {
                dist += p
                    .iter()
                    .zip(t)
                    .map(|(a, b)| (*a - *b).as_f64().powi(2))
                    .sum::<f64>()
                    .sqrt();
                count += 1;
            }
        }
    }
    Ok(Evaluation {
        loss: loss / data.len() as f64,
        mpjpe_mm: 1000.0 * dist / count.max(1) as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_mpjpe_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    /// Validation of the starting parameters, before any update.
    pub initial: Evaluation,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopping_epoch: usize,
    pub stopped_early: bool,
}

impl TrainingHistory {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().find(|e| e.epoch == self.best_epoch)
    }

    /// One row per completed epoch; values in shortest round-trip form.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,val_mpjpe_mm\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{:?},{:?},{:?}\n",
                e.epoch, e.train_loss, e.val_loss, e.val_mpjpe_mm
            ));
        }
        out
    }
}

/// Shapes of every shared tensor must agree between the model config and the data.
fn check_data<S: Scalar>(config: &ModelConfig, data: &Dataset<S>) -> Result<()> {
    let x = data.inputs.shape();
    let y = data.targets.shape();
    if x[1] != config.seq_len || x[2] != config.input_dim || y[2] != config.landmark_count {
        return Err(Error::ShapeMismatch {
            op: "train",
            lhs: vec![config.seq_len, config.input_dim, config.landmark_count],
            rhs: vec![x[1], x[2], y[2]],
        });
    }
    Ok(())
}

/// One optimisation step on a batch. Returns the batch loss.
#[allow(clippy::too_many_arguments)]
fn train_step<S: Scalar>(
    params: &mut ModelParameters<S>,
    opt: &mut AdamW<S>,
    x: &Tensor<S>,
    y: Tensor<S>,
    validity: &[bool],
    triplets: &[[usize; 3]],
    weights: &LossWeights,
    dropout: Option<&mut Dropout>,
) -> Result<f64> {
    let mut g = Graph::new(true);
    let ids = params.register(&mut g);
    let out = params.forward_nodes(&mut g, &ids, x, dropout)?;
    let target = g.constant(y);
    let (root, parts) = composite_loss_node(&mut g, out.mean, out.log_var, target, validity, triplets, weights)?;
    let grads = g.backward(root)?;
    let grads: Vec<&Tensor<S>> = ids
        .iter()
        .map(|&id| grads.get(id).expect("parameter gradient"))
        .collect();
    let flags = params.bias_flags();
    let mut tensors = params.tensors_mut();
    opt.step(&mut tensors, &grads, &flags)?;
    Ok(parts.total)
}

pub fn train<S: Scalar>(
    init: ModelParameters<S>,
    train_set: &[MotionSample],
    val_set: &[MotionSample],
    triplets: &[[usize; 3]],
    config: &TrainingConfig,
) -> Result<(ModelParameters<S>, TrainingHistory)> {
    train_with_observer(init, train_set, val_set, triplets, config, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with_observer<S: Scalar>(
    init: ModelParameters<S>,
    train_set: &[MotionSample],
    val_set: &[MotionSample],
    triplets: &[[usize; 3]],
    config: &TrainingConfig,
    mut observer: impl FnMut(&EpochRecord),
) -> Result<(ModelParameters<S>, TrainingHistory)> {
    config.validate()?;
    check_disjoint(train_set, "train", val_set, "val")?;
    let train_data = Dataset::<S>::from_samples(train_set)?;
    let val_data = Dataset::<S>::from_samples(val_set)?;
    if train_data.validity != val_data.validity {
        return Err(Error::invalid("train", "train and validation validity flags differ"));
    }
    check_data(&init.config, &train_data)?;
    check_data(&init.config, &val_data)?;

    let mut init = init;
    if init.normalizer.is_none() && config.fit_normalizer {
        init.normalizer = Some(Normalizer::fit(
            &train_data.inputs,
            &train_data.targets,
            &train_data.validity,
        )?);
    }
    let weights = &config.loss_weights;
    let initial = evaluate(&init, &val_data, triplets, weights, config.batch_size)?;
    let mut params = init;
    let mut best_params = params.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut opt = AdamW::new(config.learning_rate, config.weight_decay);
    let mut epochs = Vec::new();
    let mut order: Vec<usize> = (0..train_data.len()).collect();
    let mut stopped_early = false;
    let rate = if config.train_dropout {
        params.config.dropout_rate
    } else {
        0.0
    };

    for epoch in 1..=config.max_epochs {
        let mut shuffle = rng::stream(config.seed, rng::STREAM_SHUFFLE, epoch as u64);
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        for (b, idx) in batches(&order, config.batch_size).enumerate() {
            let (x, y) = train_data.batch(idx);
            let mut dropout = Dropout::new(
                rate,
                rng::derive_seed(config.seed, "train.dropout", ((epoch as u64) << 32) | b as u64),
            );
            let d = (rate > 0.0).then_some(&mut dropout);
            let loss = train_step(&mut params, &mut opt, &x, y, &train_data.validity, triplets, weights, d)?;
            total += loss * idx.len() as f64;
        }
        let val = evaluate(&params, &val_data, triplets, weights, config.batch_size)?;
        let record = EpochRecord {
            epoch,
            train_loss: total / train_data.len() as f64,
            val_loss: val.loss,
            val_mpjpe_mm: val.mpjpe_mm,
        };
        log::debug!(
            "epoch {epoch}: train {:.6} val {:.6} mpjpe {:.3} mm",
            record.train_loss,
            record.val_loss,
            record.val_mpjpe_mm
        );
        observer(&record);
        epochs.push(record);
        if val.loss < best_loss {
            best_loss = val.loss;
            best_epoch = epoch;
            best_params = params.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                stopped_early = true;
                break;
            }
        }
    }
    let stopping_epoch = epochs.last().map_or(0, |e| e.epoch);
    Ok((
        best_params,
        TrainingHistory {
            initial,
            epochs,
            best_epoch,
            stopping_epoch,
            stopped_early,
        },
    ))
}

/// Heteroscedastic model initialised from a deterministic one: every shared
/// tensor is copied, the log-variance head is freshly initialised from
/// `seed`. `config` must agree with the base model on every shared dimension.
pub fn warm_start_heteroscedastic<S: Scalar>(
    base: &ModelParameters<S>,
    config: &ModelConfig,
    seed: u64,
) -> Result<ModelParameters<S>> {
    if base.config.heteroscedastic {
        return Err(Error::Config("warm start expects a deterministic base model".into()));
    }
    let target = config.with_heteroscedastic(true);
    if base.config.with_heteroscedastic(true) != target {
        return Err(Error::Config(format!(
            "warm start config {:?} does not match base model {:?}",
            config, base.config
        )));
    }
    let mut out = base.clone();
    out.config = target;
    out.log_var_head = Some(init_log_var_head(&out.config, seed));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_hyperparameters() {
        let c = TrainingConfig::default();
        assert_eq!((c.learning_rate, c.weight_decay, c.batch_size), (1e-4, 0.05, 64));
        assert_eq!((c.max_epochs, c.patience), (200, 10));
        assert_eq!(
            c.loss_weights,
            LossWeights {
                vel: 1.0,
                acc: 0.5,
                angle: 1.0,
                pos: 1.0
            }
        );
    }

    #[test]
    fn batches_keep_partial_tail() {
        let order: Vec<usize> = (0..10).collect();
        let sizes: Vec<usize> = batches(&order, 4).map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }
}
