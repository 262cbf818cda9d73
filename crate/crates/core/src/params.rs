//! Named parameter bundles.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::TensorError;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    /// Frozen parameters are read as constants and never updated.
    pub frozen: bool,
    /// Row 0 is the padding embedding: kept at zero and never updated.
    pub pad_row: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics on a duplicate name, which is a model
    /// construction bug.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter `{name}`");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            grad: None,
            frozen: false,
            pad_row: false,
        });
        id
    }

    /// Registers an embedding table whose row 0 is zeroed and never trained.
    pub fn add_embedding(&mut self, name: impl Into<String>, mut value: Tensor) -> ParamId {
        let cols = value.cols();
        value.data_mut()[..cols].iter_mut().for_each(|x| *x = 0.0);
        let id = self.add(name, value);
        self.params[id.0].pad_row = true;
        id
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Result<&Param, TensorError> {
        self.id(name)
            .map(|id| &self.params[id.0])
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Freezes or unfreezes every parameter whose name starts with `prefix`.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.frozen = frozen;
            }
        }
    }

    /// Replaces a parameter value; the shape must match.
    pub fn assign(&mut self, name: &str, value: Tensor) -> Result<(), TensorError> {
        let id = self.id(name).ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "assign",
                left: p.value.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        p.value = value;
        if p.pad_row {
            let cols = p.value.cols();
            p.value.data_mut()[..cols].iter_mut().for_each(|x| *x = 0.0);
        }
        Ok(())
    }

    /// Resets every gradient buffer to zeros.
    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            match &mut p.grad {
                Some(g) => g.data_mut().iter_mut().for_each(|x| *x = 0.0),
                None => p.grad = Some(Tensor::zeros(p.value.shape())),
            }
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[f64]) {
        let p = &mut self.params[id.0];
        if p.frozen {
            return;
        }
        let buf = p.grad.get_or_insert_with(|| Tensor::zeros(p.value.shape()));
        for (o, x) in buf.data_mut().iter_mut().zip(g) {
            *o += x;
        }
        if p.pad_row {
            let cols = buf.cols();
            buf.data_mut()[..cols].iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Total number of scalar values.
    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Uniform initialization in `[-scale, scale]`.
pub fn uniform<R: Rng>(rng: &mut R, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-scale..=scale)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_pad_row_stays_zero() {
        let mut store = ParamStore::new();
        let id = store.add_embedding("emb", Tensor::filled(&[3, 2], 1.0));
        assert_eq!(store.value(id).row_slice(0), &[0.0, 0.0]);
        store.accumulate_grad(id, &[1.0; 6]);
        let g = store.get(id).grad.as_ref().unwrap();
        assert_eq!(g.row_slice(0), &[0.0, 0.0]);
        assert_eq!(g.row_slice(1), &[1.0, 1.0]);
    }

    #[test]
    fn frozen_params_ignore_gradients() {
        let mut store = ParamStore::new();
        let id = store.add("kbqa.w", Tensor::zeros(&[2]));
        store.add("dialog.w", Tensor::zeros(&[2]));
        store.set_frozen("kbqa.", true);
        store.accumulate_grad(id, &[1.0, 1.0]);
        assert!(store.get(id).grad.is_none());
        assert!(!store.by_name("dialog.w").unwrap().frozen);
    }
}
