//! Training objectives.
//!
//! Graph versions (`*_node`) take predictions of shape `[B, T, L, 3]`
//! already recorded on a graph and return a scalar node. Tensor versions
//! accept `[T, L, 3]` or `[B, T, L, 3]` and evaluate without a tape.
//! Invalid (padded) landmarks never enter any term.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Segments shorter than this (meters) make an angle undefined.
pub const DEGENERATE_SEGMENT: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub vel: f64,
    pub acc: f64,
    pub angle: f64,
    pub pos: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            vel: 1.0,
            acc: 0.5,
            angle: 1.0,
            pos: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.vel, self.acc, self.angle, self.pos];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!(
                "loss weights must be finite and >= 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Values of the individual terms of one composite evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    /// NLL for heteroscedastic models, MSE otherwise.
    pub likelihood: f64,
    pub vel: f64,
    pub acc: f64,
    pub angle: f64,
    pub pos: f64,
    pub total: f64,
    /// Triplet instances dropped because a segment was degenerate.
    pub skipped_angles: usize,
}

fn valid_indices(op: &'static str, validity: &[bool], l: usize) -> Result<Vec<usize>> {
    if validity.len() != l {
        return Err(Error::invalid(
            op,
            format!("{} validity flags for {l} landmarks", validity.len()),
        ));
    }
    let idx: Vec<usize> = (0..l).filter(|&i| validity[i]).collect();
    if idx.is_empty() {
        return Err(Error::NoValidLandmarks { op });
    }
    Ok(idx)
}

fn check_pair<S: Scalar>(op: &'static str, g: &Graph<S>, a: NodeId, b: NodeId) -> Result<()> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa != sb || sa.len() != 4 || sa[3] != 3 {
        return Err(Error::ShapeMismatch {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        });
    }
    Ok(())
}

/// Restrict the landmark axis to valid slots.
fn select_valid<S: Scalar>(g: &mut Graph<S>, x: NodeId, idx: &[usize]) -> Result<NodeId> {
    if idx.len() == g.shape(x)[2] {
        Ok(x)
    } else {
        g.gather(x, 2, idx)
    }
}

/// `0.5 * mean[(y - mu)^2 * exp(-s) + s]` over valid elements, `s = ln sigma^2`.
pub fn gaussian_nll_node<S: Scalar>(
    g: &mut Graph<S>,
    mean: NodeId,
    log_var: NodeId,
    target: NodeId,
    validity: &[bool],
) -> Result<NodeId> {
    check_pair("gaussian_nll", g, mean, target)?;
    check_pair("gaussian_nll", g, log_var, target)?;
    let idx = valid_indices("gaussian_nll", validity, g.shape(mean)[2])?;
    let mean = select_valid(g, mean, &idx)?;
    let log_var = select_valid(g, log_var, &idx)?;
    let target = select_valid(g, target, &idx)?;
    let diff = g.sub(target, mean)?;
    let sq = g.square(diff)?;
    let neg = g.scale(log_var, -S::one())?;
    let precision = g.exp(neg)?;
    let weighted = g.mul(sq, precision)?;
    let terms = g.add(weighted, log_var)?;
    let m = g.reduce_mean(terms, None)?;
    g.scale(m, S::of(0.5))
}

/// Mean squared coordinate error over valid elements.
pub fn mse_node<S: Scalar>(g: &mut Graph<S>, pred: NodeId, target: NodeId, validity: &[bool]) -> Result<NodeId> {
    check_pair("mse", g, pred, target)?;
    let idx = valid_indices("mse", validity, g.shape(pred)[2])?;
    let pred = select_valid(g, pred, &idx)?;
    let target = select_valid(g, target, &idx)?;
    let diff = g.sub(pred, target)?;
    let sq = g.square(diff)?;
    g.reduce_mean(sq, None)
}

fn temporal_diff<S: Scalar>(g: &mut Graph<S>, x: NodeId) -> Result<NodeId> {
    let t = g.shape(x)[1];
    let later = g.slice(x, 1, 1, t)?;
    let earlier = g.slice(x, 1, 0, t - 1)?;
    g.sub(later, earlier)
}

fn difference_loss<S: Scalar>(
    op: &'static str,
    order: usize,
    g: &mut Graph<S>,
    pred: NodeId,
    target: NodeId,
    validity: &[bool],
) -> Result<NodeId> {
    check_pair(op, g, pred, target)?;
    let t = g.shape(pred)[1];
    if t <= order {
        return Err(Error::invalid(
            op,
            format!("needs at least {} frames, got {t}", order + 1),
        ));
    }
    let idx = valid_indices(op, validity, g.shape(pred)[2])?;
    let mut p = select_valid(g, pred, &idx)?;
    let mut y = select_valid(g, target, &idx)?;
    for _ in 0..order {
        p = temporal_diff(g, p)?;
        y = temporal_diff(g, y)?;
    }
    let diff = g.sub(p, y)?;
    let sq = g.square(diff)?;
    g.reduce_mean(sq, None)
}

/// MSE between first temporal differences.
pub fn velocity_loss_node<S: Scalar>(
    g: &mut Graph<S>,
    pred: NodeId,
    target: NodeId,
    validity: &[bool],
) -> Result<NodeId> {
    difference_loss("velocity_loss", 1, g, pred, target, validity)
}

/// MSE between second temporal differences.
pub fn acceleration_loss_node<S: Scalar>(
    g: &mut Graph<S>,
    pred: NodeId,
    target: NodeId,
    validity: &[bool],
) -> Result<NodeId> {
    difference_loss("acceleration_loss", 2, g, pred, target, validity)
}

/// Mean Euclidean distance over valid (frame, landmark) pairs, meters.
pub fn position_loss_node<S: Scalar>(
    g: &mut Graph<S>,
    pred: NodeId,
    target: NodeId,
    validity: &[bool],
) -> Result<NodeId> {
    check_pair("position_loss", g, pred, target)?;
    let idx = valid_indices("position_loss", validity, g.shape(pred)[2])?;
    let pred = select_valid(g, pred, &idx)?;
    let target = select_valid(g, target, &idx)?;
    let diff = g.sub(pred, target)?;
    let sq = g.square(diff)?;
    let d2 = g.reduce_sum(sq, Some(3))?;
    let d = g.sqrt(d2)?;
    g.reduce_mean(d, None)
}

/// Angle at the vertex of each triplet: `atan2(|u x v|, u . v)` with
/// `u = a - b`, `v = c - b`. Returns `[B, T, n]` angles and `[B, T, n]`
/// segment norms (the smaller of `|u|`, `|v|`) as plain values.
fn triplet_angles<S: Scalar>(g: &mut Graph<S>, x: NodeId, triplets: &[[usize; 3]]) -> Result<(NodeId, Vec<f64>)> {
    let pick = |k: usize| triplets.iter().map(|t| t[k]).collect::<Vec<_>>();
    let a = g.gather(x, 2, &pick(0))?;
    let b = g.gather(x, 2, &pick(1))?;
    let c = g.gather(x, 2, &pick(2))?;
    let u = g.sub(a, b)?;
    let v = g.sub(c, b)?;
    let comp = |g: &mut Graph<S>, n: NodeId, d: usize| -> Result<NodeId> {
        let s = g.slice(n, 3, d, d + 1)?;
        g.reduce_sum(s, Some(3))
    };
    let (ux, uy, uz) = (comp(g, u, 0)?, comp(g, u, 1)?, comp(g, u, 2)?);
    let (vx, vy, vz) = (comp(g, v, 0)?, comp(g, v, 1)?, comp(g, v, 2)?);
    let mut cross_sq = None;
    for (p, q, r, s) in [(uy, vz, uz, vy), (uz, vx, ux, vz), (ux, vy, uy, vx)] {
        let left = g.mul(p, q)?;
        let right = g.mul(r, s)?;
        let c = g.sub(left, right)?;
        let c2 = g.square(c)?;
        cross_sq = Some(match cross_sq {
            None => c2,
            Some(acc) => g.add(acc, c2)?,
        });
    }
    let cross = g.sqrt(cross_sq.expect("three components"))?;
    let uv = g.mul(u, v)?;
    let dot = g.reduce_sum(uv, Some(3))?;
    let angle = g.atan2(cross, dot)?;
    let norm = |t: &Tensor<S>| -> Vec<f64> {
        t.data()
            .chunks(3)
            .map(|c| c.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt())
            .collect()
    };
    let nu = norm(g.value(u));
    let nv = norm(g.value(v));
    Ok((angle, nu.iter().zip(&nv).map(|(a, b)| a.min(*b)).collect()))
}

/// Mean absolute difference of triplet angles (radians). Instances with a
/// degenerate segment in either prediction or target are skipped; the count
/// of skipped instances is returned alongside the node.
pub fn angle_loss_node<S: Scalar>(
    g: &mut Graph<S>,
    pred: NodeId,
    target: NodeId,
    triplets: &[[usize; 3]],
    validity: &[bool],
) -> Result<(NodeId, usize)> {
    check_pair("angle_loss", g, pred, target)?;
    let l = g.shape(pred)[2];
    if validity.len() != l {
        return Err(Error::invalid(
            "angle_loss",
            format!("{} validity flags for {l} landmarks", validity.len()),
        ));
    }
    if triplets.is_empty() {
        return Err(Error::invalid("angle_loss", "no triplets"));
    }
    for t in triplets {
        if t.iter().any(|&i| i >= l || !validity[i]) {
            return Err(Error::invalid(
                "angle_loss",
                format!("triplet {t:?} references an invalid landmark"),
            ));
        }
    }
    let (ap, np) = triplet_angles(g, pred, triplets)?;
    let (at, nt) = triplet_angles(g, target, triplets)?;
    let keep: Vec<bool> = np
        .iter()
        .zip(&nt)
        .map(|(a, b)| *a >= DEGENERATE_SEGMENT && *b >= DEGENERATE_SEGMENT)
        .collect();
    let kept = keep.iter().filter(|k| **k).count();
    let skipped = keep.len() - kept;
    if kept == 0 {
        return Err(Error::invalid("angle_loss", "every triplet instance is degenerate"));
    }
    let diff = g.sub(ap, at)?;
    let abs = g.abs(diff)?;
    let masked = if skipped == 0 {
        abs
    } else {
        let shape = g.shape(abs).to_vec();
        let mask = Tensor::new(
            shape,
            keep.iter().map(|&k| if k { S::one() } else { S::zero() }).collect(),
        )?;
        let m = g.constant(mask);
        g.mul(abs, m)?
    };
    let sum = g.reduce_sum(masked, None)?;
    Ok((g.scale(sum, S::one() / S::of_usize(kept))?, skipped))
}

/// Record the full objective. With `log_var` the likelihood term is the
/// Gaussian NLL, otherwise elementwise MSE. The angle term is omitted when
/// `triplets` is empty or its weight is zero; other zero-weight terms are
/// still recorded (and reported) but contribute nothing.
pub fn composite_loss_node<S: Scalar>(
    g: &mut Graph<S>,
    mean: NodeId,
    log_var: Option<NodeId>,
    target: NodeId,
    validity: &[bool],
    triplets: &[[usize; 3]],
    weights: &LossWeights,
) -> Result<(NodeId, LossBreakdown)> {
    weights.validate()?;
    let likelihood = match log_var {
        Some(lv) => gaussian_nll_node(g, mean, lv, target, validity)?,
        None => mse_node(g, mean, target, validity)?,
    };
    let vel = velocity_loss_node(g, mean, target, validity)?;
    let acc = acceleration_loss_node(g, mean, target, validity)?;
    let pos = position_loss_node(g, mean, target, validity)?;
    let angle = if triplets.is_empty() || weights.angle == 0.0 {
        None
    } else {
        Some(angle_loss_node(g, mean, target, triplets, validity)?)
    };
    let mut total = likelihood;
    let mut terms = vec![(vel, weights.vel), (acc, weights.acc), (pos, weights.pos)];
    if let Some((node, _)) = angle {
        terms.push((node, weights.angle));
    }
    for (node, w) in terms {
        if w != 0.0 {
            let scaled = g.scale(node, S::of(w))?;
            total = g.add(total, scaled)?;
        }
    }
    let val = |g: &Graph<S>, n: NodeId| g.value(n).data()[0].as_f64();
    let breakdown = LossBreakdown {
        likelihood: val(g, likelihood),
        vel: val(g, vel),
        acc: val(g, acc),
        angle: angle.map_or(0.0, |(n, _)| val(g, n)),
        pos: val(g, pos),
        total: val(g, total),
        skipped_angles: angle.map_or(0, |(_, s)| s),
    };
    Ok((total, breakdown))
}

fn batched<S: Scalar>(t: &Tensor<S>) -> Result<Tensor<S>> {
    match t.rank() {
        4 => Ok(t.clone()),
        3 => {
            let mut shape = vec![1];
            shape.extend_from_slice(t.shape());
            t.reshape(shape)
        }
        _ => Err(Error::ShapeMismatch {
            op: "loss",
            lhs: t.shape().to_vec(),
            rhs: vec![0, 0, 3],
        }),
    }
}

fn eval<S: Scalar>(tensors: &[&Tensor<S>], f: impl FnOnce(&mut Graph<S>, &[NodeId]) -> Result<NodeId>) -> Result<f64> {
    let mut g = Graph::new(false);
    let mut ids = Vec::with_capacity(tensors.len());
    for t in tensors {
        ids.push(g.constant(batched(t)?));
    }
    let out = f(&mut g, &ids)?;
    Ok(g.value(out).data()[0].as_f64())
}

pub fn gaussian_nll<S: Scalar>(
    mean: &Tensor<S>,
    log_var: &Tensor<S>,
    target: &Tensor<S>,
    validity: &[bool],
) -> Result<f64> {
    eval(&[mean, log_var, target], |g, n| {
        gaussian_nll_node(g, n[0], n[1], n[2], validity)
    })
}

pub fn mse<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>, validity: &[bool]) -> Result<f64> {
    eval(&[pred, target], |g, n| mse_node(g, n[0], n[1], validity))
}

pub fn velocity_loss<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>, validity: &[bool]) -> Result<f64> {
    eval(&[pred, target], |g, n| velocity_loss_node(g, n[0], n[1], validity))
}

pub fn acceleration_loss<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>, validity: &[bool]) -> Result<f64> {
    eval(&[pred, target], |g, n| acceleration_loss_node(g, n[0], n[1], validity))
}

pub fn position_loss<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>, validity: &[bool]) -> Result<f64> {
    eval(&[pred, target], |g, n| position_loss_node(g, n[0], n[1], validity))
}

pub fn angle_loss<S: Scalar>(
    pred: &Tensor<S>,
    target: &Tensor<S>,
    triplets: &[[usize; 3]],
    validity: &[bool],
) -> Result<f64> {
    eval(&[pred, target], |g, n| {
        Ok(angle_loss_node(g, n[0], n[1], triplets, validity)?.0)
    })
}

pub fn composite_loss<S: Scalar>(
    mean: &Tensor<S>,
    log_var: Option<&Tensor<S>>,
    target: &Tensor<S>,
    validity: &[bool],
    triplets: &[[usize; 3]],
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let mut g = Graph::new(false);
    let m = g.constant(batched(mean)?);
    let lv = match log_var {
        Some(t) => Some(g.constant(batched(t)?)),
        None => None,
    };
    let y = g.constant(batched(target)?);
    Ok(composite_loss_node(&mut g, m, lv, y, validity, triplets, weights)?.1)
}
