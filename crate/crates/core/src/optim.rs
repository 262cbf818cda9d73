//! Adam with bias correction.

use crate::error::TensorError;
use crate::params::ParamStore;

#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter that received a
    /// gradient and clears the gradients afterwards. Parameters without a
    /// gradient buffer are left untouched, moments included.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<(), TensorError> {
        if self.first.len() != store.len() {
            self.first = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for id in store.ids().collect::<Vec<_>>() {
            let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.epsilon, self.learning_rate);
            let m = &mut self.first[id.index()];
            let v = &mut self.second[id.index()];
            let p = store.get_mut(id);
            if p.frozen {
                continue;
            }
            let Some(grad) = p.grad.take() else {
                continue;
            };
            if m.len() != grad.len() {
                return Err(TensorError::Contract(format!(
                    "moment buffer for `{}` has {} values, parameter has {}",
                    p.name,
                    m.len(),
                    grad.len()
                )));
            }
            for (((w, g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Tensor};

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(1.0));
        store.zero_grads();
        store.get_mut(id).grad = Some(Tensor::scalar(5.0));
        let mut adam = Adam::new(0.001);
        adam.step(&mut store).unwrap();
        let moved = 1.0 - store.value(id).item();
        assert!((moved - 0.001).abs() < 1e-9, "{moved}");
        assert!(store.get(id).grad.is_none());
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::row(vec![0.3, -0.2]));
        store.zero_grads();
        let mut adam = Adam::new(0.01);
        adam.step(&mut store).unwrap();
        assert_eq!(store.value(id).data(), &[0.3, -0.2]);
    }

    #[test]
    fn parameters_without_gradient_are_skipped() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(1.0));
        let y = store.add("y", Tensor::scalar(1.0));
        let mut adam = Adam::new(0.01);
        store.get_mut(x).grad = Some(Tensor::scalar(1.0));
        adam.step(&mut store).unwrap();
        adam.step(&mut store).unwrap();
        assert_eq!(store.value(y).item(), 1.0);
        assert!((store.value(x).item() - 0.99).abs() < 1e-9);
    }

    #[test]
    fn two_steps_decrease_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(1.0));
        let f = |store: &ParamStore| store.value(id).item().powi(2);
        let mut adam = Adam::new(0.1);
        let start = f(&store);
        let mut prev = start;
        for _ in 0..2 {
            store.zero_grads();
            let mut g = Graph::new();
            let x = g.param(&store, id);
            let y = g.mul(x, x).unwrap();
            g.backward(y, &mut store).unwrap();
            adam.step(&mut store).unwrap();
            let now = f(&store);
            assert!(now < prev);
            prev = now;
        }
    }
}
