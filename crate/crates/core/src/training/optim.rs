use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Adam with decoupled weight decay. Decay is applied to the parameter
/// before the moment update and skipped for tensors flagged as biases.
#[derive(Debug, Clone)]
pub struct AdamW<S> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<S>], grads: &[&Tensor<S>], is_bias: &[bool]) -> Result<()> {
        if params.len() != grads.len() || params.len() != is_bias.len() {
            return Err(Error::invalid(
                "adamw",
                format!(
                    "{} params, {} grads, {} flags",
                    params.len(),
                    grads.len(),
                    is_bias.len()
                ),
            ));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![S::zero(); p.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let (b1, b2) = (S::of(self.beta1), S::of(self.beta2));
        let one = S::one();
        let c1 = one - S::of(self.beta1.powi(self.step as i32));
        let c2 = one - S::of(self.beta2.powi(self.step as i32));
        let lr = S::of(self.lr);
        let eps = S::of(self.eps);
        let decay = one - lr * S::of(self.weight_decay);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() || self.m[i].len() != p.len() {
                return Err(Error::ShapeMismatch {
                    op: "adamw",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = p.data_mut();
            for j in 0..data.len() {
                let gj = g.data()[j];
                if !is_bias[i] {
                    data[j] *= decay;
                }
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                data[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Tensor::from_vec(vec![1.0_f64, -2.0]).unwrap();
        let g = Tensor::from_vec(vec![0.3, -4.0]).unwrap();
        let mut opt = AdamW::new(0.1, 0.0);
        opt.step(&mut [&mut p], &[&g], &[false]).unwrap();
        // m_hat = g, v_hat = g^2, so each element moves lr * sign(g)
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn decay_skips_biases() {
        let mut w = Tensor::from_vec(vec![1.0_f64]).unwrap();
        let mut b = Tensor::from_vec(vec![1.0_f64]).unwrap();
        let zero = Tensor::from_vec(vec![0.0]).unwrap();
        let mut opt = AdamW::new(0.1, 0.5);
        opt.step(&mut [&mut w, &mut b], &[&zero, &zero], &[false, true])
            .unwrap();
        assert!((w.data()[0] - 0.95).abs() < 1e-15);
        assert_eq!(b.data()[0], 1.0);
    }
}
