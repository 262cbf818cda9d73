//! Central-difference gradient checking.

use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::{Graph, Var};

/// Compares analytic gradients of a scalar function of the store's trainable
/// parameters against central differences with step `h`.
///
/// Returns the largest `|analytic - numeric| / max(1, |analytic|)` over all
/// trainable parameter values. Gradient buffers in `store` are left holding
/// the analytic gradient.
pub fn grad_check<F>(store: &mut ParamStore, h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    store.zero_grads();
    let mut g = Graph::new();
    let root = f(&mut g, store)?;
    g.backward(root, store)?;

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::no_grad();
        let root = f(&mut g, store)?;
        Ok(g.value(root).item())
    };

    let mut worst: f64 = 0.0;
    for id in store.ids().collect::<Vec<_>>() {
        if store.get(id).frozen {
            continue;
        }
        let analytic = store.get(id).grad.clone().expect("zeroed above");
        for i in 0..analytic.len() {
            let original = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = original + h;
            let plus = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = original - h;
            let minus = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn square_at_three() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(3.0));
        let err = grad_check(&mut store, 1e-5, |g, s| {
            let v = g.param(s, x);
            Ok(g.mul(v, v)?)
        })
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
