//! Central finite-difference check of taped gradients.

use crate::autodiff::graph::{Graph, NodeId};
use crate::autodiff::tensor::Tensor;
use crate::error::Result;
use crate::scalar::Scalar;

/// Denominator floor for the relative error, so gradients that are zero up
/// to rounding are compared absolutely instead of blowing up the ratio.
pub const DEFAULT_ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub param: usize,
    pub checked: usize,
    /// Elements whose central difference straddles a non-differentiable
    /// point (or lands on one), so the comparison is meaningless.
    pub excluded: Vec<usize>,
    pub max_rel_error: f64,
    pub worst_element: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }

    pub fn excluded_count(&self) -> usize {
        self.params.iter().map(|p| p.excluded.len()).sum()
    }

    pub fn checked_count(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }
}

struct Probe<S> {
    value: S,
    signature: u64,
}

fn probe<S, F>(f: &F, params: &[Tensor<S>]) -> Option<Probe<S>>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new(false);
    g.track_branches(true);
    let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = f(&mut g, &ids).ok()?;
    Some(Probe {
        value: g.value(root).item()?,
        signature: g.branch_signature(),
    })
}

/// Compare reverse-mode gradients of `f` against central differences with
/// step `step`. `f` must be deterministic and build its scalar output from
/// the parameter nodes it is given.
pub fn grad_check<S, F>(f: F, params: &[Tensor<S>], step: S, tolerance: f64) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, &[NodeId]) -> Result<NodeId>,
{
    grad_check_with_floor(f, params, step, tolerance, DEFAULT_ABS_FLOOR)
}

pub fn grad_check_with_floor<S, F>(
    f: F,
    params: &[Tensor<S>],
    step: S,
    tolerance: f64,
    abs_floor: f64,
) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new(true);
    g.track_branches(true);
    let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = f(&mut g, &ids)?;
    let base_signature = g.branch_signature();
    let grads = g.backward(root)?;

    let mut report = GradCheckReport {
        params: Vec::with_capacity(params.len()),
        tolerance,
        max_rel_error: 0.0,
    };
    let mut work: Vec<Tensor<S>> = params.to_vec();
    for (p, id) in ids.iter().enumerate() {
        let taped = grads.get(*id).expect("every param leaf has a gradient");
        let mut check = ParamCheck {
            param: p,
            checked: 0,
            excluded: Vec::new(),
            max_rel_error: 0.0,
            worst_element: None,
        };
        for e in 0..params[p].len() {
            let original = params[p].data()[e];
            let mut data = params[p].data().to_vec();
            data[e] = original + step;
            work[p] = Tensor::new(params[p].shape().to_vec(), data.clone())?;
            let plus = probe(&f, &work);
            data[e] = original - step;
            work[p] = Tensor::new(params[p].shape().to_vec(), data)?;
            let minus = probe(&f, &work);
            work[p] = params[p].clone();

            let (Some(plus), Some(minus)) = (plus, minus) else {
                check.excluded.push(e);
                continue;
            };
            if plus.signature != minus.signature || plus.signature != base_signature {
                check.excluded.push(e);
                continue;
            }
            let numeric = ((plus.value - minus.value) / (step + step)).as_f64();
            let analytic = taped.data()[e].as_f64();
            let denom = analytic.abs().max(numeric.abs()).max(abs_floor);
            let rel = (analytic - numeric).abs() / denom;
            check.checked += 1;
            if rel > check.max_rel_error || check.worst_element.is_none() {
                check.max_rel_error = check.max_rel_error.max(rel);
                if rel >= check.max_rel_error {
                    check.worst_element = Some(e);
                }
            }
        }
        report.max_rel_error = report.max_rel_error.max(check.max_rel_error);
        report.params.push(check);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_in_five_parameters() {
        // f(w) = sum_i c_i w_i^2 + w_0 w_4
        let w = Tensor::new(vec![5], vec![0.3, -1.2, 2.0, 0.7, -0.4]).unwrap();
        let report = grad_check(
            |g, p| {
                let c = g.constant(Tensor::new(vec![5], vec![1.0, 2.0, 0.5, 3.0, 1.5])?);
                let sq = g.square(p[0])?;
                let weighted = g.mul(sq, c)?;
                let s = g.reduce_sum(weighted, None)?;
                let w0 = g.slice(p[0], 0, 0, 1)?;
                let w4 = g.slice(p[0], 0, 4, 5)?;
                let cross = g.mul(w0, w4)?;
                let cross = g.reduce_sum(cross, None)?;
                g.add(s, cross)
            },
            &[w],
            1e-5,
            1e-9,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.checked_count(), 5);
    }

    #[test]
    fn clamp_interior_gradient_is_one() {
        let w = Tensor::scalar(0.25);
        let report = grad_check(|g, p| g.clamp(p[0], -1.0, 1.0), &[w], 1e-5, 1e-8).unwrap();
        assert!(report.passed());
        assert_eq!(report.excluded_count(), 0);
    }

    #[test]
    fn clamp_on_boundary_is_excluded() {
        let w = Tensor::scalar(1.0);
        let report = grad_check(|g, p| g.clamp(p[0], -1.0, 1.0), &[w], 1e-5, 1e-8).unwrap();
        assert_eq!(report.params[0].excluded, vec![0]);
        assert_eq!(report.checked_count(), 0);
    }
}
