//! Dense tensors and a tape-based reverse-mode differentiation engine.
//!
//! A [`Graph`] records every operation of one forward pass. Values are kept on
//! the tape so that [`Graph::backward`] can replay the recorded operations in
//! reverse order and accumulate gradients into the leaves and into the
//! parameters of a [`ParamStore`]. A tape is single use: once backward has run
//! it refuses to run again.
//!
//! All tensors are rank 1 or rank 2 and row-major. Vectors participating in
//! matrix products are represented as `[1, n]` rows.

use std::collections::HashMap;

use rand::Rng;

use crate::error::TensorError;
use crate::params::{ParamId, ParamStore};

type TResult<T> = std::result::Result<T, TensorError>;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> TResult<Self> {
        let expected: usize = shape.iter().product();
        if shape.is_empty() || shape.len() > 2 || expected != data.len() || shape.contains(&0) {
            return Err(TensorError::BadLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// A `[1, n]` row vector.
    pub fn row(values: Vec<f64>) -> Self {
        Tensor {
            shape: vec![1, values.len()],
            data: values,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> TResult<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    /// Product of all axes but the last.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softmax(Var),
    NormalizeSum(Var),
    Concat(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanAxis(Var, usize),
    Sum(Var),
    Gather(Var, Vec<usize>),
    SliceCols(Var, usize),
    Reshape(Var),
    RepeatRows(Var),
    Dropout(Var, Vec<f64>),
    CrossEntropy(Var, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// One forward pass worth of recorded operations.
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    track: bool,
    consumed: bool,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape.clone(),
        right: b.shape.clone(),
    }
}

/// `out[m,n] = a[m,k] * b[k,n]`
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

impl Graph {
    /// A tape that tracks gradients.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            track: true,
            consumed: false,
            grads: Vec::new(),
        }
    }

    /// A tape for inference: parameters are read as constants and
    /// [`Graph::backward`] is rejected.
    pub fn no_grad() -> Self {
        Graph {
            track: false,
            ..Graph::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Gradient of a leaf created with `requires_grad`, available after backward.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor {
            shape: self.nodes[v.0].value.shape.clone(),
            data: g.clone(),
        })
    }

    fn push(&mut self, value: Tensor, op: Op, inputs_need: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad: self.track && inputs_need,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf holding `value`.
    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.input(value, false)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Var {
        self.constant(Tensor::zeros(shape))
    }

    /// The tape node for a parameter; each parameter is recorded at most once.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param(id), !p.frozen);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> TResult<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let out = matmul_raw(&ta.data, &tb.data, m, k, n);
        let need = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul(a, b),
            need,
        ))
    }

    fn zip_same(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        record: Op,
    ) -> TResult<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(shape_err(op, ta, tb));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| f(*x, *y)).collect();
        let shape = ta.shape.clone();
        let need = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor { shape, data }, record, need))
    }

    pub fn add(&mut self, a: Var, b: Var) -> TResult<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> TResult<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> TResult<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds the row `b` (`[1, n]` or `[n]`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> TResult<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let n = ta.cols();
        if tb.len() != n {
            return Err(shape_err("add_row", ta, tb));
        }
        let mut data = ta.data.clone();
        for row in data.chunks_mut(n) {
            for (x, y) in row.iter_mut().zip(&tb.data) {
                *x += y;
            }
        }
        let shape = ta.shape.clone();
        let need = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor { shape, data }, Op::AddRow(a, b), need))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let data = t.data.iter().map(|x| x * c).collect();
        let shape = t.shape.clone();
        let need = self.needs(a);
        self.push(Tensor { shape, data }, Op::Scale(a, c), need)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let data = t.data.iter().map(|x| f(*x)).collect();
        let shape = t.shape.clone();
        let need = self.needs(a);
        self.push(Tensor { shape, data }, op, need)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
            Op::Sigmoid(a),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Row-wise softmax over the last axis. `mask[j] == false` excludes column
    /// `j`; excluded positions get exactly zero weight. A row with every
    /// position masked yields all zeros.
    pub fn masked_softmax(&mut self, a: Var, mask: Option<&[bool]>) -> TResult<Var> {
        let t = self.value(a);
        let n = t.cols();
        if let Some(m) = mask {
            if m.len() != n {
                return Err(TensorError::ShapeMismatch {
                    op: "masked_softmax",
                    left: t.shape.clone(),
                    right: vec![m.len()],
                });
            }
        }
        let keep = |j: usize| mask.is_none_or(|m| m[j]);
        let mut data = vec![0.0; t.len()];
        for (r, out) in data.chunks_mut(n).enumerate() {
            let row = t.row_slice(r);
            let max = (0..n)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for j in 0..n {
                if keep(j) {
                    out[j] = (row[j] - max).exp();
                    total += out[j];
                }
            }
            for o in out.iter_mut() {
                *o /= total;
            }
        }
        let shape = t.shape.clone();
        let need = self.needs(a);
        Ok(self.push(Tensor { shape, data }, Op::Softmax(a), need))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        self.masked_softmax(a, None).expect("unmasked softmax has no shape contract")
    }

    /// Row-wise `x / sum(x)`. The caller is responsible for a non-zero sum.
    pub fn normalize_sum(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.cols();
        let mut data = t.data.clone();
        for row in data.chunks_mut(n) {
            let s: f64 = row.iter().sum();
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        let shape = t.shape.clone();
        let need = self.needs(a);
        self.push(Tensor { shape, data }, Op::NormalizeSum(a), need)
    }

    /// Concatenation along the last axis; all parts must have the same rows.
    pub fn concat(&mut self, parts: &[Var]) -> TResult<Var> {
        let first = self.value(parts[0]);
        let rows = first.rows();
        let rank = first.shape.len();
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(shape_err("concat", first, t));
            }
            cols += t.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let shape = if rank == 1 { vec![cols] } else { vec![rows, cols] };
        let need = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor { shape, data }, Op::Concat(parts.to_vec()), need))
    }

    /// Stacks parts along the first axis; all parts must have the same columns.
    pub fn concat_rows(&mut self, parts: &[Var]) -> TResult<Var> {
        let first = self.value(parts[0]);
        let cols = first.cols();
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(shape_err("concat_rows", first, t));
            }
            data.extend_from_slice(&t.data);
        }
        let rows = data.len() / cols;
        let need = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor {
                shape: vec![rows, cols],
                data,
            },
            Op::ConcatRows(parts.to_vec()),
            need,
        ))
    }

    /// Mean over axis 0 (giving `[1, cols]`) or axis 1 (giving `[rows, 1]`).
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> TResult<Var> {
        let t = self.value(a);
        let (rows, cols) = (t.rows(), t.cols());
        let (shape, data) = match axis {
            0 => {
                let mut out = vec![0.0; cols];
                for r in 0..rows {
                    for (o, x) in out.iter_mut().zip(t.row_slice(r)) {
                        *o += x;
                    }
                }
                out.iter_mut().for_each(|o| *o /= rows as f64);
                (vec![1, cols], out)
            }
            1 => {
                let out = (0..rows)
                    .map(|r| t.row_slice(r).iter().sum::<f64>() / cols as f64)
                    .collect();
                (vec![rows, 1], out)
            }
            _ => {
                return Err(TensorError::OutOfRange {
                    op: "mean_axis",
                    index: axis,
                    size: 2,
                })
            }
        };
        let need = self.needs(a);
        Ok(self.push(Tensor { shape, data }, Op::MeanAxis(a, axis), need))
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let need = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), need)
    }

    /// Row gather: `out[i] = table[ids[i]]`. Serves both embedding lookup and
    /// row selection.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> TResult<Var> {
        let t = self.value(table);
        let (rows, cols) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            if i >= rows {
                return Err(TensorError::OutOfRange {
                    op: "gather",
                    index: i,
                    size: rows,
                });
            }
            data.extend_from_slice(t.row_slice(i));
        }
        if ids.is_empty() {
            return Err(TensorError::Contract("gather with no ids".into()));
        }
        let need = self.needs(table);
        Ok(self.push(
            Tensor {
                shape: vec![ids.len(), cols],
                data,
            },
            Op::Gather(table, ids.to_vec()),
            need,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> TResult<Var> {
        let t = self.value(a);
        let cols = t.cols();
        if start + len > cols || len == 0 {
            return Err(TensorError::OutOfRange {
                op: "slice_cols",
                index: start + len,
                size: cols,
            });
        }
        let rows = t.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&t.row_slice(r)[start..start + len]);
        }
        let need = self.needs(a);
        Ok(self.push(
            Tensor {
                shape: vec![rows, len],
                data,
            },
            Op::SliceCols(a, start),
            need,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> TResult<Var> {
        let t = self.value(a);
        let value = Tensor::new(shape.to_vec(), t.data.clone())?;
        let need = self.needs(a);
        Ok(self.push(value, Op::Reshape(a), need))
    }

    /// Repeats a single row `times` times.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> TResult<Var> {
        let t = self.value(a);
        if t.rows() != 1 || times == 0 {
            return Err(TensorError::Contract(format!(
                "repeat_rows needs one row and times > 0, got {:?} x {times}",
                t.shape
            )));
        }
        let data = t.data.repeat(times);
        let cols = t.cols();
        let need = self.needs(a);
        Ok(self.push(
            Tensor {
                shape: vec![times, cols],
                data,
            },
            Op::RepeatRows(a),
            need,
        ))
    }

    /// Inverted dropout. Identity when `train` is false or `rate` is zero.
    pub fn dropout<R: Rng>(&mut self, a: Var, rate: f64, train: bool, rng: &mut R) -> TResult<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::DropoutRate(rate));
        }
        if !train || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - rate;
        let t = self.value(a);
        let mask: Vec<f64> = (0..t.len())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data = t.data.iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = t.shape.clone();
        let need = self.needs(a);
        Ok(self.push(Tensor { shape, data }, Op::Dropout(a, mask), need))
    }

    /// Summed negative log-likelihood of `targets[r]` under `softmax(logits[r])`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> TResult<Var> {
        let t = self.value(logits);
        let (rows, cols) = (t.rows(), t.cols());
        if rows != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: t.shape.clone(),
                right: vec![targets.len()],
            });
        }
        let mut total = 0.0;
        for (r, &y) in targets.iter().enumerate() {
            if y >= cols {
                return Err(TensorError::OutOfRange {
                    op: "cross_entropy",
                    index: y,
                    size: cols,
                });
            }
            let row = t.row_slice(r);
            total += log_sum_exp(row) - row[y];
        }
        let need = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(total),
            Op::CrossEntropy(logits, targets.to_vec()),
            need,
        ))
    }

    /// Propagates d(root)/d(node) to every leaf and parameter that requires a
    /// gradient. Parameter gradients are added to the store's buffers.
    pub fn backward(&mut self, root: Var, store: &mut ParamStore) -> TResult<()> {
        if !self.track {
            return Err(TensorError::NoGradTape);
        }
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let root_val = &self.nodes[root.0].value;
        if root_val.len() != 1 {
            return Err(TensorError::NonScalarRoot(root_val.shape.clone()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Param(id) => {
                    store.accumulate_grad(*id, &g);
                }
                Op::MatMul(a, b) => {
                    let ta = &self.nodes[a.0].value;
                    let tb = &self.nodes[b.0].value;
                    let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                    if self.nodes[a.0].needs_grad {
                        let ga = grad_slot(&mut grads, *a, m * k);
                        for i2 in 0..m {
                            let grow = &g[i2 * n..(i2 + 1) * n];
                            for p in 0..k {
                                let brow = &tb.data[p * n..(p + 1) * n];
                                ga[i2 * k + p] += dot(grow, brow);
                            }
                        }
                    }
                    if self.nodes[b.0].needs_grad {
                        let gb = grad_slot(&mut grads, *b, k * n);
                        for i2 in 0..m {
                            let grow = &g[i2 * n..(i2 + 1) * n];
                            for p in 0..k {
                                let av = ta.data[i2 * k + p];
                                if av == 0.0 {
                                    continue;
                                }
                                for (o, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *o += av * gv;
                                }
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, &g, 1.0);
                    self.acc(&mut grads, *b, &g, 1.0);
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *a, &g, 1.0);
                    self.acc(&mut grads, *b, &g, -1.0);
                }
                Op::AddRow(a, b) => {
                    self.acc(&mut grads, *a, &g, 1.0);
                    if self.nodes[b.0].needs_grad {
                        let n = self.nodes[b.0].value.len();
                        let gb = grad_slot(&mut grads, *b, n);
                        for row in g.chunks(n) {
                            for (o, x) in gb.iter_mut().zip(row) {
                                *o += x;
                            }
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.nodes[a.0].needs_grad {
                        let other = &self.nodes[b.0].value.data;
                        let ga = grad_slot(&mut grads, a, g.len());
                        for ((o, gv), y) in ga.iter_mut().zip(&g).zip(other) {
                            *o += gv * y;
                        }
                    }
                    if self.nodes[b.0].needs_grad {
                        let other = &self.nodes[a.0].value.data;
                        let gb = grad_slot(&mut grads, b, g.len());
                        for ((o, gv), x) in gb.iter_mut().zip(&g).zip(other) {
                            *o += gv * x;
                        }
                    }
                }
                Op::Scale(a, c) => self.acc(&mut grads, *a, &g, *c),
                Op::Tanh(a) => {
                    let y = &node.value.data;
                    let local: Vec<f64> = g.iter().zip(y).map(|(gv, y)| gv * (1.0 - y * y)).collect();
                    self.acc(&mut grads, *a, &local, 1.0);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value.data;
                    let local: Vec<f64> = g.iter().zip(y).map(|(gv, y)| gv * y * (1.0 - y)).collect();
                    self.acc(&mut grads, *a, &local, 1.0);
                }
                Op::Relu(a) => {
                    let x = &self.nodes[a.0].value.data;
                    let local: Vec<f64> = g
                        .iter()
                        .zip(x)
                        .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                        .collect();
                    self.acc(&mut grads, *a, &local, 1.0);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let n = y.cols();
                    let mut local = vec![0.0; g.len()];
                    for (r, out) in local.chunks_mut(n).enumerate() {
                        let yr = y.row_slice(r);
                        let gr = &g[r * n..(r + 1) * n];
                        let s = dot(gr, yr);
                        for j in 0..n {
                            out[j] = yr[j] * (gr[j] - s);
                        }
                    }
                    self.acc(&mut grads, *a, &local, 1.0);
                }
                Op::NormalizeSum(a) => {
                    let x = &self.nodes[a.0].value;
                    let y = &node.value;
                    let n = x.cols();
                    let mut local = vec![0.0; g.len()];
                    for (r, out) in local.chunks_mut(n).enumerate() {
                        let s: f64 = x.row_slice(r).iter().sum();
                        let gr = &g[r * n..(r + 1) * n];
                        let gy = dot(gr, y.row_slice(r));
                        for j in 0..n {
                            out[j] = (gr[j] - gy) / s;
                        }
                    }
                    self.acc(&mut grads, *a, &local, 1.0);
                }
                Op::Concat(parts) => {
                    let rows = node.value.rows();
                    let cols = node.value.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.nodes[p.0].value.cols();
                        if self.nodes[p.0].needs_grad {
                            let gp = grad_slot(&mut grads, p, rows * pc);
                            for r in 0..rows {
                                let src = &g[r * cols + offset..r * cols + offset + pc];
                                for (o, x) in gp[r * pc..(r + 1) * pc].iter_mut().zip(src) {
                                    *o += x;
                                }
                            }
                        }
                        offset += pc;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.nodes[p.0].value.len();
                        self.acc(&mut grads, p, &g[offset..offset + len], 1.0);
                        offset += len;
                    }
                }
                Op::MeanAxis(a, axis) => {
                    let x = &self.nodes[a.0].value;
                    let (rows, cols) = (x.rows(), x.cols());
                    let mut local = vec![0.0; rows * cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            local[r * cols + c] = if *axis == 0 {
                                g[c] / rows as f64
                            } else {
                                g[r] / cols as f64
                            };
                        }
                    }
                    self.acc(&mut grads, *a, &local, 1.0);
                }
                Op::Sum(a) => {
                    let n = self.nodes[a.0].value.len();
                    let local = vec![g[0]; n];
                    self.acc(&mut grads, *a, &local, 1.0);
                }
                Op::Gather(table, ids) => {
                    let t = &self.nodes[table.0].value;
                    let cols = t.cols();
                    let gt = grad_slot(&mut grads, *table, t.len());
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, x) in gt[id * cols..(id + 1) * cols].iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                            *o += x;
                        }
                    }
                }
                Op::SliceCols(a, start) => {
                    let x = &self.nodes[a.0].value;
                    let (rows, cols) = (x.rows(), x.cols());
                    let len = node.value.cols();
                    let ga = grad_slot(&mut grads, *a, rows * cols);
                    for r in 0..rows {
                        for j in 0..len {
                            ga[r * cols + start + j] += g[r * len + j];
                        }
                    }
                }
                Op::Reshape(a) => self.acc(&mut grads, *a, &g, 1.0),
                Op::RepeatRows(a) => {
                    let n = self.nodes[a.0].value.len();
                    let mut local = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (o, x) in local.iter_mut().zip(row) {
                            *o += x;
                        }
                    }
                    self.acc(&mut grads, *a, &local, 1.0);
                }
                Op::Dropout(a, mask) => {
                    let local: Vec<f64> = g.iter().zip(mask).map(|(gv, m)| gv * m).collect();
                    self.acc(&mut grads, *a, &local, 1.0);
                }
                Op::CrossEntropy(logits, targets) => {
                    let t = &self.nodes[logits.0].value;
                    let cols = t.cols();
                    let mut local = vec![0.0; t.len()];
                    for (r, &y) in targets.iter().enumerate() {
                        let row = t.row_slice(r);
                        let lse = log_sum_exp(row);
                        let out = &mut local[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            out[j] = g[0] * (row[j] - lse).exp();
                        }
                        out[y] -= g[0];
                    }
                    self.acc(&mut grads, *logits, &local, 1.0);
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], target: Var, g: &[f64], c: f64) {
        if !self.nodes[target.0].needs_grad {
            return;
        }
        let slot = grad_slot(grads, target, g.len());
        for (o, x) in slot.iter_mut().zip(g) {
            *o += c * x;
        }
    }
}

fn grad_slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(vec![1.0, 1.0, 1.0]));
        let y = g.softmax(x);
        for v in g.value(y).data() {
            assert!(close(*v, 1.0 / 3.0));
        }
    }

    #[test]
    fn softmax_closed_form() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(vec![0.0, 3f64.ln()]));
        let y = g.softmax(x);
        assert!(close(g.value(y).data()[0], 0.25));
        assert!(close(g.value(y).data()[1], 0.75));
    }

    #[test]
    fn masked_positions_are_exactly_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(vec![5.0, 1.0, 2.0, 9.0]));
        let y = g.masked_softmax(x, Some(&[true, false, true, false])).unwrap();
        let d = g.value(y).data();
        assert_eq!(d[1], 0.0);
        assert_eq!(d[3], 0.0);
        assert!(close(d[0] + d[2], 1.0));
    }

    #[test]
    fn concat_shapes() {
        let mut g = Graph::new();
        let a = g.zeros(&[2, 3]);
        let b = g.zeros(&[2, 5]);
        let c = g.concat(&[a, b]).unwrap();
        assert_eq!(g.shape(c), &[2, 8]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.zeros(&[2, 3]);
        let b = g.zeros(&[2, 3]);
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![2, 3],
                right: vec![2, 3]
            }
        );
    }

    #[test]
    fn square_gradient() {
        let mut store = ParamStore::new();
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(3.0), true);
        let y = g.mul(x, x).unwrap();
        g.backward(y, &mut store).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn tanh_gradient_at_zero() {
        let mut store = ParamStore::new();
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(0.0), true);
        let y = g.tanh(x);
        g.backward(y, &mut store).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 1.0);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut store = ParamStore::new();
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(1.5), true);
        let y = g.add(x, x).unwrap();
        g.backward(y, &mut store).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 2.0);
    }

    #[test]
    fn backward_rejects_non_scalar_and_second_call() {
        let mut store = ParamStore::new();
        let mut g = Graph::new();
        let x = g.input(Tensor::row(vec![1.0, 2.0]), true);
        assert_eq!(
            g.backward(x, &mut store),
            Err(TensorError::NonScalarRoot(vec![1, 2]))
        );
        let s = g.sum(x);
        g.backward(s, &mut store).unwrap();
        assert_eq!(g.backward(s, &mut store), Err(TensorError::TapeConsumed));
    }

    #[test]
    fn no_grad_tape_rejects_backward() {
        let mut store = ParamStore::new();
        let mut g = Graph::no_grad();
        let x = g.input(Tensor::scalar(1.0), true);
        assert_eq!(g.backward(x, &mut store), Err(TensorError::NoGradTape));
    }

    #[test]
    fn dropout_identity_cases_and_rate_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(vec![1.0, -2.0, 3.0]));
        assert_eq!(g.dropout(x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(g.dropout(x, 0.5, false, &mut rng).unwrap(), x);
        assert_eq!(
            g.dropout(x, 1.0, true, &mut rng),
            Err(TensorError::DropoutRate(1.0))
        );
        assert_eq!(
            g.dropout(x, -0.1, true, &mut rng),
            Err(TensorError::DropoutRate(-0.1))
        );
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 10]));
        let l = g.cross_entropy(x, &[3, 7]).unwrap();
        assert!((g.value(l).item() - 2.0 * 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 0.0]), 1);
    }
}
