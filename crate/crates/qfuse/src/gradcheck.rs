//! Central finite-difference verification of analytic gradients.

use crate::error::TensorError;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// One checked entry of the input tensor.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckEntry {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Per-entry comparison of analytic and finite-difference gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }

    /// Entries whose relative error exceeds the tolerance.
    pub fn failures(&self) -> Vec<&GradCheckEntry> {
        self.entries.iter().filter(|e| e.rel_err > self.tol).collect()
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Check d f / d point for a scalar-valued graph function.
///
/// `f` builds a fresh subgraph from the input leaf to a scalar output; the
/// analytic gradient from one backward pass is compared entry-by-entry
/// against central differences (f(x+h) - f(x-h)) / 2h, which only ever use
/// the forward path.
pub fn grad_check<F>(
    f: F,
    point: &Tensor,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, TensorError>,
{
    assert!(step > 0.0, "step must be positive");
    let eval = |t: &Tensor| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let mut input = t.clone();
        input.requires_grad = false;
        let v = g.leaf(input);
        let out = f(&mut g, v)?;
        let val = g.value(out);
        if val.numel() != 1 {
            return Err(TensorError::NotScalarLoss(val.numel()));
        }
        let y = val.data()[0];
        if !y.is_finite() {
            return Err(TensorError::NonFiniteOutput("grad_check target".into()));
        }
        Ok(y)
    };

    // analytic pass
    let analytic = {
        let mut g = Graph::new();
        let mut input = point.clone();
        input.requires_grad = true;
        let v = g.leaf(input);
        let out = f(&mut g, v)?;
        if g.value(out).numel() != 1 {
            return Err(TensorError::NotScalarLoss(g.value(out).numel()));
        }
        if !g.value(out).data()[0].is_finite() {
            return Err(TensorError::NonFiniteOutput("grad_check target".into()));
        }
        g.backward(out)?;
        g.grad(v).expect("leaf gradient").to_vec()
    };

    let mut entries = Vec::with_capacity(point.numel());
    let mut max_rel = 0.0f64;
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
        let e = rel_err(analytic[i], numeric);
        max_rel = max_rel.max(e);
        entries.push(GradCheckEntry {
            index: i,
            analytic: analytic[i],
            numeric,
            rel_err: e,
        });
    }
    Ok(GradCheckReport {
        entries,
        max_rel_err: max_rel,
        tol,
    })
}

/// Check analytic gradients of named parameters against central differences
/// of an arbitrary scalar loss.
///
/// `loss` re-evaluates the full forward pass from scratch; `analytic` maps
/// parameter name to the gradient produced by backward. Every entry of every
/// named parameter is perturbed.
pub fn grad_check_params<L>(
    params: &mut std::collections::BTreeMap<String, Tensor>,
    analytic: &[(String, Vec<f64>)],
    mut loss: L,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport, TensorError>
where
    L: FnMut(&std::collections::BTreeMap<String, Tensor>) -> Result<f64, TensorError>,
{
    let mut entries = Vec::new();
    let mut max_rel = 0.0f64;
    let mut offset = 0usize;
    for (name, grad) in analytic {
        for i in 0..grad.len() {
            let orig = params[name].data()[i];
            params.get_mut(name).unwrap().data_mut()[i] = orig + step;
            let lp = loss(params)?;
            params.get_mut(name).unwrap().data_mut()[i] = orig - step;
            let lm = loss(params)?;
            params.get_mut(name).unwrap().data_mut()[i] = orig;
            if !lp.is_finite() || !lm.is_finite() {
                return Err(TensorError::NonFiniteOutput(name.clone()));
            }
            let numeric = (lp - lm) / (2.0 * step);
            let e = rel_err(grad[i], numeric);
            max_rel = max_rel.max(e);
            entries.push(GradCheckEntry {
                index: offset + i,
                analytic: grad[i],
                numeric,
                rel_err: e,
            });
        }
        offset += grad.len();
    }
    Ok(GradCheckReport {
        entries,
        max_rel_err: max_rel,
        tol,
    })
}
