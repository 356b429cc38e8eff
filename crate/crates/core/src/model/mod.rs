//! Sequence-to-sequence LSTM mapping flattened keypoint frames to landmark
//! means and, optionally, per-coordinate log-variances.
//!
//! Layout conventions:
//! * input batch `[B, T, 3K]`, each frame flattened keypoint-major,
//!   coordinate-minor (`k0x, k0y, k0z, k1x, ...`);
//! * outputs `[B, T, L, 3]` in meters (mean) and `ln m^2` (log-variance).
//!
//! Dropout sites: after every LSTM layer except the last, and separately in
//! front of each output head. Inverted dropout (kept units scaled by
//! `1 / (1 - p)`), masks drawn independently per element and time step.
//!
//! Inputs are standardised with fixed per-feature statistics and the mean
//! head predicts standardised landmark coordinates, which are mapped back to
//! meters inside the forward pass. With `input_skip` the mean head also sees
//! the standardised input frame next to the top hidden state. Dropout never
//! touches the skipped input.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;

pub const DEFAULT_KEYPOINTS: usize = 20;
pub const DEFAULT_LANDMARKS: usize = 43;
pub const DEFAULT_SEQ_LEN: usize = 60;

/// `ln(0.05^2)`: the log-variance head starts out predicting sigma = 5 cm.
pub const INITIAL_LOG_VAR: f64 = -5.991_464_547_107_982;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub landmark_count: usize,
    pub seq_len: usize,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub dropout_rate: f64,
    pub heteroscedastic: bool,
    pub log_var_clamp: (f64, f64),
    pub input_skip: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 3 * DEFAULT_KEYPOINTS,
            landmark_count: DEFAULT_LANDMARKS,
            seq_len: DEFAULT_SEQ_LEN,
            hidden_size: 128,
            num_layers: 2,
            dropout_rate: 0.1,
            heteroscedastic: false,
            log_var_clamp: (-10.0, 4.0),
            input_skip: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.input_dim == 0 || !self.input_dim.is_multiple_of(3) {
            return bad(format!("input_dim {} must be a positive multiple of 3", self.input_dim));
        }
        if self.landmark_count == 0 || self.seq_len == 0 || self.hidden_size == 0 || self.num_layers == 0 {
            return bad(format!(
                "degenerate dimensions: landmarks {}, seq_len {}, hidden {}, layers {}",
                self.landmark_count, self.seq_len, self.hidden_size, self.num_layers
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        let (lo, hi) = self.log_var_clamp;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return bad(format!("log_var_clamp ({lo}, {hi}) is not an increasing finite pair"));
        }
        Ok(())
    }

    pub fn keypoint_count(&self) -> usize {
        self.input_dim / 3
    }

    pub fn output_dim(&self) -> usize {
        3 * self.landmark_count
    }

    /// Width of the mean head input.
    pub fn mean_head_inputs(&self) -> usize {
        self.hidden_size + if self.input_skip { self.input_dim } else { 0 }
    }

    /// Whether the dimensions deviate from K = 20, L = 43, T = 60.
    pub fn is_non_standard(&self) -> bool {
        self.input_dim != 3 * DEFAULT_KEYPOINTS
            || self.landmark_count != DEFAULT_LANDMARKS
            || self.seq_len != DEFAULT_SEQ_LEN
    }

    /// The configuration with the log-variance head switched on or off.
    pub fn with_heteroscedastic(&self, on: bool) -> Self {
        Self {
            heteroscedastic: on,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer<S> {
    /// `[in, 4H]`, gate blocks ordered input, forget, cell, output.
    pub w_ih: Tensor<S>,
    /// `[H, 4H]`
    pub w_hh: Tensor<S>,
    /// `[4H]`
    pub bias: Tensor<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<S> {
    /// `[in, out]`
    pub weight: Tensor<S>,
    /// `[out]`
    pub bias: Tensor<S>,
}

/// Fixed feature statistics: `x' = (x - input_mean) / input_scale` on the
/// way in, `y = output_mean + output_scale * y'` on the way out. Not trained.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer<S> {
    /// `[3K]`
    pub input_mean: Tensor<S>,
    /// `[3K]`
    pub input_scale: Tensor<S>,
    /// `[3L]`
    pub output_mean: Tensor<S>,
    /// `[3L]`
    pub output_scale: Tensor<S>,
}

/// Standard deviations below this are treated as constant features.
const MIN_SCALE: f64 = 1e-6;

fn feature_stats<S: Scalar>(data: &[S], width: usize) -> (Vec<S>, Vec<S>) {
    let rows = data.len() / width;
    let mut mean = vec![0.0; width];
    for row in data.chunks(width) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v.as_f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    let mut var = vec![0.0; width];
    for row in data.chunks(width) {
        for ((acc, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *acc += (v.as_f64() - m).powi(2);
        }
    }
    let scale = var
        .iter()
        .map(|v| {
            let sd = (v / rows as f64).sqrt();
            S::of(if sd < MIN_SCALE { 1.0 } else { sd })
        })
        .collect();
    (mean.into_iter().map(S::of).collect(), scale)
}

impl<S: Scalar> Normalizer<S> {
    /// Per-feature mean and standard deviation over all frames of
    /// `inputs [N, T, 3K]` and `targets [N, T, L, 3]`. Invalid landmark
    /// slots keep mean 0 and scale 1.
    pub fn fit(inputs: &Tensor<S>, targets: &Tensor<S>, validity: &[bool]) -> Result<Self> {
        let width_in = *inputs.shape().last().unwrap_or(&0);
        let l = validity.len();
        if inputs.rank() != 3 || targets.rank() != 4 || targets.shape()[2] != l || width_in == 0 {
            return Err(Error::ShapeMismatch {
                op: "normalizer.fit",
                lhs: inputs.shape().to_vec(),
                rhs: targets.shape().to_vec(),
            });
        }
        let (im, is) = feature_stats(inputs.data(), width_in);
        let (mut om, mut os) = feature_stats(targets.data(), 3 * l);
        for (j, valid) in validity.iter().enumerate() {
            if !valid {
                for d in 0..3 {
                    om[3 * j + d] = S::zero();
                    os[3 * j + d] = S::one();
                }
            }
        }
        Ok(Self {
            input_mean: Tensor::new(vec![width_in], im)?,
            input_scale: Tensor::new(vec![width_in], is)?,
            output_mean: Tensor::new(vec![3 * l], om)?,
            output_scale: Tensor::new(vec![3 * l], os)?,
        })
    }

    pub fn identity(input_dim: usize, output_dim: usize) -> Self {
        let t = |n: usize, v: S| Tensor::full(vec![n], v).expect("positive width");
        Self {
            input_mean: t(input_dim, S::zero()),
            input_scale: t(input_dim, S::one()),
            output_mean: t(output_dim, S::zero()),
            output_scale: t(output_dim, S::one()),
        }
    }

    pub fn tensors(&self) -> [&Tensor<S>; 4] {
        [
            &self.input_mean,
            &self.input_scale,
            &self.output_mean,
            &self.output_scale,
        ]
    }

    /// Standardise a `[B, T, 3K]` batch.
    pub fn apply_input(&self, batch: &Tensor<S>) -> Tensor<S> {
        let (m, s) = (self.input_mean.data(), self.input_scale.data());
        let w = m.len();
        let mut out = batch.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = (*v - m[i % w]) / s[i % w];
        }
        out
    }
}

/// All learnable weights plus the architecture they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters<S> {
    pub config: ModelConfig,
    pub layers: Vec<LstmLayer<S>>,
    pub mean_head: Linear<S>,
    pub log_var_head: Option<Linear<S>>,
    /// Identity when absent.
    pub normalizer: Option<Normalizer<S>>,
}

/// Output of a non-taped forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput<S> {
    /// `[B, T, L, 3]`, meters
    pub mean: Tensor<S>,
    /// `[B, T, L, 3]`, clamped `ln m^2`; present iff heteroscedastic
    pub log_var: Option<Tensor<S>>,
}

/// Node handles for a forward pass recorded on a graph.
#[derive(Debug, Clone, Copy)]
pub struct ForwardNodes {
    pub mean: NodeId,
    pub log_var: Option<NodeId>,
}

/// Dropout mask source for one forward pass.
pub struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Self {
        Self {
            rate,
            rng: rng::stream(seed, rng::STREAM_DROPOUT, 0),
        }
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// Inverted-dropout mask: each entry is 0 with probability `rate`,
    /// otherwise `1 / (1 - rate)`.
    pub fn mask<S: Scalar>(&mut self, shape: &[usize]) -> Tensor<S> {
        let keep = S::of(1.0 / (1.0 - self.rate));
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                if self.rng.gen::<f64>() < self.rate {
                    S::zero()
                } else {
                    keep
                }
            })
            .collect();
        Tensor::new(shape.to_vec(), data).expect("mask shape")
    }
}

fn uniform<S: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| S::of(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

/// Fresh log-variance head: weights uniform in a narrow band, bias at
/// [`INITIAL_LOG_VAR`], so every initial sigma lies close to 0.05 m.
pub fn init_log_var_head<S: Scalar>(config: &ModelConfig, seed: u64) -> Linear<S> {
    let mut rng = rng::stream(seed, rng::STREAM_INIT, 1_000);
    let h = config.hidden_size;
    let bound = 1e-3 / (h as f64).sqrt();
    Linear {
        weight: uniform(&mut rng, &[h, config.output_dim()], bound),
        bias: Tensor::full(vec![config.output_dim()], S::of(INITIAL_LOG_VAR)).expect("bias shape"),
    }
}

/// Weights uniform in `(-1/sqrt(H), 1/sqrt(H))`, forget-gate bias +1, other
/// biases zero.
pub fn init_model<S: Scalar>(config: &ModelConfig, seed: u64) -> Result<ModelParameters<S>> {
    config.validate()?;
    let h = config.hidden_size;
    let bound = 1.0 / (h as f64).sqrt();
    let mut rng = rng::stream(seed, rng::STREAM_INIT, 0);
    let mut layers = Vec::with_capacity(config.num_layers);
    for l in 0..config.num_layers {
        let input = if l == 0 { config.input_dim } else { h };
        let w_ih = uniform(&mut rng, &[input, 4 * h], bound);
        let w_hh = uniform(&mut rng, &[h, 4 * h], bound);
        let bias = Tensor::from_fn(
            vec![4 * h],
            |i| if (h..2 * h).contains(&i) { S::one() } else { S::zero() },
        )?;
        layers.push(LstmLayer { w_ih, w_hh, bias });
    }
    let mean_head = Linear {
        weight: uniform(&mut rng, &[config.mean_head_inputs(), config.output_dim()], bound),
        bias: Tensor::zeros(vec![config.output_dim()])?,
    };
    let log_var_head = config.heteroscedastic.then(|| init_log_var_head(config, seed));
    Ok(ModelParameters {
        config: config.clone(),
        layers,
        mean_head,
        log_var_head,
        normalizer: None,
    })
}

impl<S: Scalar> ModelParameters<S> {
    /// All tensors in a fixed order: per layer (w_ih, w_hh, bias), then the
    /// mean head (weight, bias), then the log-variance head if present.
    pub fn tensors(&self) -> Vec<&Tensor<S>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.extend([&layer.w_ih, &layer.w_hh, &layer.bias]);
        }
        out.extend([&self.mean_head.weight, &self.mean_head.bias]);
        if let Some(head) = &self.log_var_head {
            out.extend([&head.weight, &head.bias]);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            out.extend([&mut layer.w_ih, &mut layer.w_hh, &mut layer.bias]);
        }
        out.extend([&mut self.mean_head.weight, &mut self.mean_head.bias]);
        if let Some(head) = &mut self.log_var_head {
            out.extend([&mut head.weight, &mut head.bias]);
        }
        out
    }

    /// Names matching [`tensors`](Self::tensors).
    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for l in 0..self.layers.len() {
            out.extend([
                format!("layer{l}.w_ih"),
                format!("layer{l}.w_hh"),
                format!("layer{l}.bias"),
            ]);
        }
        out.extend(["mean_head.weight".to_string(), "mean_head.bias".to_string()]);
        if self.log_var_head.is_some() {
            out.extend(["log_var_head.weight".to_string(), "log_var_head.bias".to_string()]);
        }
        out
    }

    /// Whether each tensor (same order) is a bias. Weight decay skips biases.
    pub fn bias_flags(&self) -> Vec<bool> {
        self.tensors().iter().map(|t| t.rank() == 1).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn checksum(&self) -> u64 {
        self.tensors()
            .iter()
            .fold(0u64, |acc, t| acc.rotate_left(7) ^ t.checksum())
    }

    /// Register every tensor as a differentiable leaf, in [`tensors`](Self::tensors) order.
    pub fn register(&self, g: &mut Graph<S>) -> Vec<NodeId> {
        self.tensors().into_iter().map(|t| g.param(t.clone())).collect()
    }

    fn check_input(&self, batch: &Tensor<S>) -> Result<()> {
        let c = &self.config;
        let shape = batch.shape();
        if shape.len() != 3 || shape[1] != c.seq_len || shape[2] != c.input_dim {
            return Err(Error::ShapeMismatch {
                op: "model.forward",
                lhs: shape.to_vec(),
                rhs: vec![shape.first().copied().unwrap_or(0), c.seq_len, c.input_dim],
            });
        }
        if !batch.all_finite() {
            return Err(Error::NonFinite {
                op: "model.forward input",
            });
        }
        Ok(())
    }

    /// Record a forward pass on `g` using parameter nodes from
    /// [`register`](Self::register).
    pub fn forward_nodes(
        &self,
        g: &mut Graph<S>,
        params: &[NodeId],
        batch: &Tensor<S>,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<ForwardNodes> {
        self.check_input(batch)?;
        let c = &self.config;
        let (b, t, h) = (batch.shape()[0], c.seq_len, c.hidden_size);
        let x = match &self.normalizer {
            Some(n) => g.constant(n.apply_input(batch)),
            None => g.constant(batch.clone()),
        };
        let x = g.permute(x, &[1, 0, 2])?;
        let frames = g.reshape(x, &[t * b, c.input_dim])?;
        let mut seq = frames;
        let mut apply_dropout = |g: &mut Graph<S>, node: NodeId| -> Result<NodeId> {
            match dropout.as_deref_mut() {
                Some(d) if d.rate() > 0.0 => {
                    let m = g.constant(d.mask(g.shape(node)));
                    g.mul(node, m)
                }
                _ => Ok(node),
            }
        };
        for (l, ids) in params[..3 * c.num_layers].chunks(3).enumerate() {
            let (w_ih, w_hh, bias) = (ids[0], ids[1], ids[2]);
            let projected = g.matmul(seq, w_ih)?;
            let projected = g.add(projected, bias)?;
            let zeros = Tensor::zeros(vec![b, h])?;
            let mut hidden = g.constant(zeros.clone());
            let mut cell = g.constant(zeros);
            let mut outputs = Vec::with_capacity(t);
            for step in 0..t {
                let xw = g.slice(projected, 0, step * b, (step + 1) * b)?;
                let hw = g.matmul(hidden, w_hh)?;
                let gates = g.add(xw, hw)?;
                let state = g.lstm_cell(gates, cell)?;
                hidden = g.slice(state, 1, 0, h)?;
                cell = g.slice(state, 1, h, 2 * h)?;
                outputs.push(hidden);
            }
            seq = g.concat(&outputs, 0)?;
            if l + 1 < c.num_layers {
                seq = apply_dropout(g, seq)?;
            }
        }
        let head_base = 3 * c.num_layers;
        let mut head = |g: &mut Graph<S>, w: NodeId, bias: NodeId, skip: bool| -> Result<NodeId> {
            let mut input = apply_dropout(g, seq)?;
            if skip {
                input = g.concat(&[input, frames], 1)?;
            }
            let out = g.matmul(input, w)?;
            g.add(out, bias)
        };
        let to_batch_major = |g: &mut Graph<S>, out: NodeId| -> Result<NodeId> {
            let out = g.reshape(out, &[t, b, c.landmark_count, 3])?;
            g.permute(out, &[1, 0, 2, 3])
        };
        let mut mean = head(g, params[head_base], params[head_base + 1], c.input_skip)?;
        if let Some(n) = &self.normalizer {
            let scale = g.constant(n.output_scale.clone());
            let shift = g.constant(n.output_mean.clone());
            mean = g.mul(mean, scale)?;
            mean = g.add(mean, shift)?;
        }
        let mean = to_batch_major(g, mean)?;
        let log_var = if self.log_var_head.is_some() {
            let raw = head(g, params[head_base + 2], params[head_base + 3], false)?;
            let raw = to_batch_major(g, raw)?;
            let (lo, hi) = c.log_var_clamp;
            Some(g.clamp(raw, S::of(lo), S::of(hi))?)
        } else {
            None
        };
        Ok(ForwardNodes { mean, log_var })
    }

    /// Forward pass without a tape. Dropout masks come from `rng_seed` when
    /// `dropout_active`; otherwise the seed is ignored.
    pub fn forward(&self, batch: &Tensor<S>, dropout_active: bool, rng_seed: u64) -> Result<ModelOutput<S>> {
        let rate = if dropout_active { self.config.dropout_rate } else { 0.0 };
        self.forward_with_rate(batch, rate, rng_seed)
    }

    /// Forward pass with an explicit dropout rate (0 disables dropout).
    pub fn forward_with_rate(&self, batch: &Tensor<S>, rate: f64, rng_seed: u64) -> Result<ModelOutput<S>> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(
                "model.forward",
                format!("dropout rate {rate} outside [0, 1)"),
            ));
        }
        let mut g = Graph::new(false);
        let ids = self.register(&mut g);
        let mut dropout = Dropout::new(rate, rng_seed);
        let nodes = self.forward_nodes(&mut g, &ids, batch, (rate > 0.0).then_some(&mut dropout))?;
        Ok(ModelOutput {
            mean: g.value(nodes.mean).clone(),
            log_var: nodes.log_var.map(|id| g.value(id).clone()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ModelConfig {
        ModelConfig {
            input_dim: 6,
            landmark_count: 2,
            seq_len: 4,
            hidden_size: 8,
            num_layers: 2,
            dropout_rate: 0.1,
            heteroscedastic: true,
            log_var_clamp: (-10.0, 4.0),
            input_skip: true,
        }
    }

    fn batch(b: usize, t: usize, d: usize) -> Tensor<f64> {
        Tensor::from_fn(vec![b, t, d], |i| ((i as f64) * 0.37).sin() * 0.3).unwrap()
    }

    #[test]
    fn init_is_seed_deterministic() {
        let c = ModelConfig::default();
        let a = init_model::<f64>(&c, 1).unwrap();
        let b = init_model::<f64>(&c, 1).unwrap();
        let other = init_model::<f64>(&c, 2).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), other.checksum());
    }

    #[test]
    fn zero_hidden_size_is_rejected() {
        let c = ModelConfig {
            hidden_size: 0,
            ..ModelConfig::default()
        };
        assert!(init_model::<f64>(&c, 0).is_err());
    }

    #[test]
    fn initial_sigma_is_five_centimeters() {
        assert!((INITIAL_LOG_VAR - (0.05f64 * 0.05).ln()).abs() < 1e-15);
        let c = small_config();
        let p = init_model::<f64>(&c, 3).unwrap();
        let out = p.forward(&batch(2, 4, 6), false, 0).unwrap();
        for &lv in out.log_var.unwrap().data() {
            let sigma = (lv / 2.0).exp();
            assert!((sigma - 0.05).abs() < 0.05 * 0.01, "{sigma}");
        }
    }

    #[test]
    fn default_shapes() {
        let p = init_model::<f64>(&ModelConfig::default(), 0).unwrap();
        let out = p.forward(&batch(2, 60, 60), false, 0).unwrap();
        assert_eq!(out.mean.shape(), &[2, 60, 43, 3]);
        assert!(out.log_var.is_none());
    }

    #[test]
    fn dropout_off_ignores_seed_and_on_is_seeded() {
        let p = init_model::<f64>(&small_config(), 5).unwrap();
        let x = batch(3, 4, 6);
        assert_eq!(p.forward(&x, false, 1).unwrap(), p.forward(&x, false, 99).unwrap());
        assert_eq!(p.forward(&x, true, 7).unwrap(), p.forward(&x, true, 7).unwrap());
        assert_ne!(
            p.forward(&x, true, 7).unwrap().mean,
            p.forward(&x, true, 8).unwrap().mean
        );
    }

    #[test]
    fn rejects_bad_input() {
        let p = init_model::<f64>(&small_config(), 5).unwrap();
        assert!(matches!(
            p.forward(&batch(1, 5, 6), false, 0),
            Err(Error::ShapeMismatch { .. })
        ));
        let mut data = batch(1, 4, 6).into_data();
        data[3] = f64::NAN;
        let x = Tensor::new(vec![1, 4, 6], data).unwrap();
        assert!(matches!(p.forward(&x, false, 0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn log_var_respects_clamp() {
        let mut p = init_model::<f64>(&small_config(), 5).unwrap();
        let head = p.log_var_head.as_mut().unwrap();
        head.weight = head.weight.map(|w| w * 1e9);
        let out = p.forward(&batch(2, 4, 6), false, 0).unwrap();
        let lv = out.log_var.unwrap();
        assert!(lv.data().iter().all(|&v| (-10.0..=4.0).contains(&v)));
        assert!(lv.data().iter().any(|&v| v == -10.0 || v == 4.0), "{lv:?}");
    }

    #[test]
    fn dropout_rate_is_respected() {
        let mut d = Dropout::new(0.1, 42);
        let m: Tensor<f64> = d.mask(&[100_000]);
        let zeros = m.data().iter().filter(|&&v| v == 0.0).count();
        let frac = zeros as f64 / 1e5;
        assert!((frac - 0.1).abs() < 0.01, "{frac}");
        let kept = m.data().iter().find(|&&v| v != 0.0).unwrap();
        assert!((kept - 1.0 / 0.9).abs() < 1e-15);
    }

    #[test]
    fn taped_and_untaped_forward_agree_bitwise() {
        let p = init_model::<f64>(&small_config(), 5).unwrap();
        let x = batch(2, 4, 6);
        let plain = p.forward(&x, true, 11).unwrap();
        let mut g = Graph::new(true);
        let ids = p.register(&mut g);
        let mut d = Dropout::new(0.1, 11);
        let nodes = p.forward_nodes(&mut g, &ids, &x, Some(&mut d)).unwrap();
        assert_eq!(g.value(nodes.mean), &plain.mean);
        assert_eq!(g.value(nodes.log_var.unwrap()), plain.log_var.as_ref().unwrap());
    }

    #[test]
    fn output_at_frame_depends_on_window() {
        // Many-to-many over the whole window: perturbing frame 0 moves later outputs.
        let p = init_model::<f64>(&small_config(), 5).unwrap();
        let x = batch(1, 4, 6);
        let mut data = x.data().to_vec();
        data[0] += 0.5;
        let y = Tensor::new(vec![1, 4, 6], data).unwrap();
        let a = p.forward(&x, false, 0).unwrap().mean;
        let b = p.forward(&y, false, 0).unwrap().mean;
        assert_ne!(
            a.index_axis0(0).unwrap().data()[6 * 3..],
            b.index_axis0(0).unwrap().data()[6 * 3..]
        );
    }
}
