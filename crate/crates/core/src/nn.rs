//! Layers built on the tape: linear maps, GRU cells and stacks, additive
//! attention and the two-layer scoring MLP.

use rand::Rng;

use crate::error::TensorError;
use crate::params::{uniform, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

type TResult<T> = std::result::Result<T, TensorError>;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.w"), uniform(rng, &[input, output], scale));
        let bias = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[1, output])));
        Linear {
            weight,
            bias,
            input,
            output,
        }
    }

    /// `x[n, input] -> [n, output]`
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> TResult<Var> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Gated recurrent unit:
/// `z = σ(x Wz + h Uz + bz)`, `r = σ(x Wr + h Ur + br)`,
/// `n = tanh(x Wn + (r ⊙ h) Un + bn)`, `h' = n + z ⊙ (h - n)`.
#[derive(Clone, Debug)]
pub struct GruCell {
    /// Input weights for z, r and n side by side: `[input, 3H]`.
    pub wx: ParamId,
    pub uzr: ParamId,
    pub un: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        GruCell {
            wx: store.add(format!("{name}.wx"), uniform(rng, &[input, 3 * hidden], scale)),
            uzr: store.add(format!("{name}.uzr"), uniform(rng, &[hidden, 2 * hidden], scale)),
            un: store.add(format!("{name}.un"), uniform(rng, &[hidden, hidden], scale)),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[1, 3 * hidden])),
            input,
            hidden,
        }
    }

    /// Input projection for every row of `x`: `[n, 3H]`.
    pub fn project_inputs(&self, g: &mut Graph, store: &ParamStore, x: Var) -> TResult<Var> {
        let wx = g.param(store, self.wx);
        let b = g.param(store, self.b);
        let y = g.matmul(x, wx)?;
        g.add_row(y, b)
    }

    /// One step from a precomputed input projection row `[1, 3H]`.
    pub fn step_projected(&self, g: &mut Graph, store: &ParamStore, xw: Var, h: Var) -> TResult<Var> {
        let hd = self.hidden;
        let uzr = g.param(store, self.uzr);
        let un = g.param(store, self.un);
        let x_zr = g.slice_cols(xw, 0, 2 * hd)?;
        let x_n = g.slice_cols(xw, 2 * hd, hd)?;
        let h_zr = g.matmul(h, uzr)?;
        let pre = g.add(x_zr, h_zr)?;
        let zr = g.sigmoid(pre);
        let z = g.slice_cols(zr, 0, hd)?;
        let r = g.slice_cols(zr, hd, hd)?;
        let rh = g.mul(r, h)?;
        let rhu = g.matmul(rh, un)?;
        let pre_n = g.add(x_n, rhu)?;
        let n = g.tanh(pre_n);
        let diff = g.sub(h, n)?;
        let zd = g.mul(z, diff)?;
        g.add(n, zd)
    }

    pub fn step(&self, g: &mut Graph, store: &ParamStore, x: Var, h: Var) -> TResult<Var> {
        let xw = self.project_inputs(g, store, x)?;
        self.step_projected(g, store, xw, h)
    }

    /// Runs over the rows of `x` from a zero state, optionally right to left.
    /// Returns the states in input order.
    pub fn run(&self, g: &mut Graph, store: &ParamStore, x: Var, reverse: bool) -> TResult<Vec<Var>> {
        let n = g.value(x).rows();
        let xw = self.project_inputs(g, store, x)?;
        let mut h = g.zeros(&[1, self.hidden]);
        let mut states = vec![h; n];
        let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
        for i in order {
            let row = g.gather(xw, &[i])?;
            h = self.step_projected(g, store, row, h)?;
            states[i] = h;
        }
        Ok(states)
    }
}

/// Bidirectional GRU whose per-position output is `[forward; backward]`.
#[derive(Clone, Debug)]
pub struct BiGru {
    pub forward: GruCell,
    pub backward: GruCell,
}

impl BiGru {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        BiGru {
            forward: GruCell::new(store, &format!("{name}.fwd"), input, hidden, scale, rng),
            backward: GruCell::new(store, &format!("{name}.bwd"), input, hidden, scale, rng),
        }
    }

    pub fn output_size(&self) -> usize {
        2 * self.forward.hidden
    }

    /// `x[n, input] -> [n, 2H]`
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> TResult<Var> {
        let fwd = self.forward.run(g, store, x, false)?;
        let bwd = self.backward.run(g, store, x, true)?;
        let f = g.concat_rows(&fwd)?;
        let b = g.concat_rows(&bwd)?;
        g.concat(&[f, b])
    }
}

/// Multi-layer unidirectional GRU.
#[derive(Clone, Debug)]
pub struct StackedGru {
    pub layers: Vec<GruCell>,
}

impl StackedGru {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        layers: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let layers = (0..layers)
            .map(|l| {
                let inp = if l == 0 { input } else { hidden };
                GruCell::new(store, &format!("{name}.l{l}"), inp, hidden, scale, rng)
            })
            .collect();
        StackedGru { layers }
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].hidden
    }

    /// Encodes every row of `x`; returns the top-layer states `[n, H]`.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, x: Var) -> TResult<Var> {
        let mut input = x;
        for layer in &self.layers {
            let states = layer.run(g, store, input, false)?;
            input = g.concat_rows(&states)?;
        }
        Ok(input)
    }

    /// One step through all layers; `state` holds one `[1, H]` row per layer.
    pub fn step(&self, g: &mut Graph, store: &ParamStore, x: Var, state: &[Var]) -> TResult<Vec<Var>> {
        let mut input = x;
        let mut next = Vec::with_capacity(self.layers.len());
        for (layer, &h) in self.layers.iter().zip(state) {
            let h2 = layer.step(g, store, input, h)?;
            next.push(h2);
            input = h2;
        }
        Ok(next)
    }
}

/// Additive attention `score_k = vᵀ tanh(W q + U key_k)`.
#[derive(Clone, Debug)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub v: ParamId,
}

/// Keys with their projections computed once per sequence.
#[derive(Clone, Copy, Debug)]
pub struct AttentionKeys {
    pub keys: Var,
    pub projected: Var,
}

impl Attention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        query: usize,
        key: usize,
        size: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        Attention {
            query: Linear::new(store, &format!("{name}.w"), query, size, false, scale, rng),
            key: Linear::new(store, &format!("{name}.u"), key, size, false, scale, rng),
            v: store.add(format!("{name}.v"), uniform(rng, &[size, 1], scale)),
        }
    }

    pub fn prepare(&self, g: &mut Graph, store: &ParamStore, keys: Var) -> TResult<AttentionKeys> {
        let projected = self.key.forward(g, store, keys)?;
        Ok(AttentionKeys { keys, projected })
    }

    /// Scores of every query row against every key row: `[q, n]`, one row per query.
    fn scores(&self, g: &mut Graph, store: &ParamStore, query: Var, keys: &AttentionKeys) -> TResult<Var> {
        let n = g.value(keys.keys).rows();
        let q = self.query.forward(g, store, query)?;
        let v = g.param(store, self.v);
        let rows = g.value(q).rows();
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let qr = if rows == 1 { q } else { g.gather(q, &[r])? };
            let sum = g.add_row(keys.projected, qr)?;
            let act = g.tanh(sum);
            let s = g.matmul(act, v)?;
            out.push(g.reshape(s, &[1, n])?);
        }
        if out.len() == 1 {
            Ok(out[0])
        } else {
            g.concat_rows(&out)
        }
    }

    /// Returns `(context [q, key], weights [q, n])`, one row per query row.
    pub fn attend(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        query: Var,
        keys: &AttentionKeys,
        mask: Option<&[bool]>,
    ) -> TResult<(Var, Var)> {
        let scores = self.scores(g, store, query, keys)?;
        let weights = g.masked_softmax(scores, mask)?;
        let ctx = g.matmul(weights, keys.keys)?;
        Ok((ctx, weights))
    }
}

/// `linear(tanh(linear(x)))` with a scalar output per row.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        Mlp {
            hidden: Linear::new(store, &format!("{name}.l1"), input, hidden, true, scale, rng),
            out: Linear::new(store, &format!("{name}.l2"), hidden, 1, true, scale, rng),
        }
    }

    pub fn input_size(&self) -> usize {
        self.hidden.input
    }

    /// `x[n, input] -> [n, 1]`
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> TResult<Var> {
        let h = self.hidden.forward(g, store, x)?;
        let h = g.tanh(h);
        self.out.forward(g, store, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gru_with_zero_parameters_stays_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cell = GruCell::new(&mut store, "gru", 3, 4, 0.0, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(&[5, 3], 0.7));
        let states = cell.run(&mut g, &store, x, false).unwrap();
        for s in states {
            assert!(g.value(s).data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn bigru_output_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let bi = BiGru::new(&mut store, "bi", 2, 3, 0.5, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(uniform(&mut rng, &[4, 2], 1.0));
        let y = bi.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), &[4, 6]);
    }

    #[test]
    fn composite_layers_pass_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let stack = StackedGru::new(&mut store, "enc", 3, 4, 2, 0.5, &mut rng);
        let att = Attention::new(&mut store, "att", 4, 4, 3, 0.5, &mut rng);
        let mlp = Mlp::new(&mut store, "mlp", 4, 5, 0.5, &mut rng);
        let x = uniform(&mut rng, &[3, 3], 1.0);
        let err = grad_check(&mut store, 1e-5, |g, s| {
            let xv = g.constant(x.clone());
            let h = stack.encode(g, s, xv)?;
            let keys = att.prepare(g, s, h)?;
            let q = g.gather(h, &[2])?;
            let (ctx, _) = att.attend(g, s, q, &keys, Some(&[true, true, false]))?;
            let score = mlp.forward(g, s, ctx)?;
            Ok(g.sum(score))
        })
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
