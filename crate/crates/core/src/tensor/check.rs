use alloc::format;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Compares reverse-mode gradients against central finite differences.
///
/// `f` builds a scalar function of its input on the given graph. The tape
/// is recorded once and replayed for every perturbed coordinate. Returns
/// `max_i |analytic_i − numeric_i| / max(1, |analytic_i|)`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: FnOnce(&mut Graph<f64>, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("grad_check: eps must be positive"));
    }
    let mut g = Graph::new();
    let input = g.input("x", x.clone());
    let loss = f(&mut g, input)?;
    let at = |g: &Graph<f64>| -> Result<f64> {
        let v = g.value(loss);
        if v.numel() != 1 {
            return Err(Error::NonScalarLoss(v.shape().to_vec()));
        }
        let v = v.item();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("grad_check: function value {v}")));
        }
        Ok(v)
    };
    at(&g)?;
    g.backward(loss)?;
    let analytic = g
        .grad(input)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        g.forward(&[("x", probe.clone())])?;
        let plus = at(&g)?;
        probe.data_mut()[i] = orig - eps;
        g.forward(&[("x", probe.clone())])?;
        let minus = at(&g)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
