//! Central finite-difference oracle for checking [`Graph`] gradients.
//!
//! Each checked element is perturbed by `±h` with `h = step·max(1, |x|)` and
//! the graph is rebuilt from scratch, so the oracle only relies on forward
//! values.

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::Result;

/// Default relative step of the central differences.
pub const DEFAULT_STEP: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// `(input, element, analytic, numeric)` of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic and numeric gradients of the scalar built by `build`
/// from leaves holding `inputs`. `max_per_input` limits the number of
/// (evenly spaced) elements checked per input.
pub fn check<F>(inputs: &[Tensor], build: F, max_per_input: Option<usize>, floor: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |values: &[Tensor], with_grad: bool| -> Result<(f64, Vec<Option<Tensor>>)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|t| g.leaf(t.clone(), with_grad)).collect();
        let loss = build(&mut g, &ids)?;
        let v = g.value(loss).data()[0];
        if !with_grad {
            return Ok((v, Vec::new()));
        }
        let grads = g.backward(loss)?;
        Ok((v, ids.iter().map(|id| grads.get(*id).cloned()).collect()))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut report = GradCheckReport { max_rel_err: 0.0, checked: 0, worst: None };
    for (k, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let picks: Vec<usize> = match max_per_input {
            Some(m) if m < n => (0..m).map(|j| j * n / m).collect(),
            _ => (0..n).collect(),
        };
        for i in picks {
            let x = input.data()[i];
            let h = DEFAULT_STEP * x.abs().max(1.0);
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] = x + h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] = x - h;
            let numeric = (eval(&plus, false)?.0 - eval(&minus, false)?.0) / (2.0 * h);
            let a = analytic[k].as_ref().map_or(0.0, |t| t.data()[i]);
            let err = relative_error(a, numeric, floor);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((k, i, a, numeric));
            }
        }
    }
    Ok(report)
}
