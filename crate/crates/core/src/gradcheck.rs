//! Central-difference gradient checking.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Array;

fn evaluate<F>(f: &mut F, point: &Array) -> Result<f64>
where
    F: FnMut(&mut Graph, NodeId) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let x = g.input(point.clone());
    let root = f(&mut g, x)?;
    let v = g.value(root);
    if !v.is_scalar() {
        return Err(Error::NonScalarRoot(v.shape().to_vec()));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("function value {v}")));
    }
    Ok(v)
}

/// Maximum over coordinates of `|analytic − numeric| / max(1e-12, |analytic| + |numeric|)`,
/// where `numeric` is the central difference with step `eps`.
///
/// `f` builds a scalar from the graph leaf that holds `point`.
pub fn grad_check<F>(mut f: F, point: &Array, eps: f64) -> Result<f64>
where
    F: FnMut(&mut Graph, NodeId) -> Result<NodeId>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid(
            "grad_check",
            format!("eps must be positive, got {eps}"),
        ));
    }
    let mut g = Graph::new();
    let x = g.input(point.clone());
    let root = f(&mut g, x)?;
    if !g.value(root).is_scalar() {
        return Err(Error::NonScalarRoot(g.value(root).shape().to_vec()));
    }
    if !g.value(root).item().is_finite() {
        return Err(Error::NonFinite(format!(
            "function value {}",
            g.value(root).item()
        )));
    }
    let analytic = g.backward(root)?.take(x);

    let mut worst: f64 = 0.0;
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = point.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = evaluate(&mut f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = evaluate(&mut f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}
