use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use transdg::gradcheck::grad_check;
use transdg::nn::{Attention, BiGru, Mlp, StackedGru};
use transdg::params::uniform;
use transdg::tensor::argmax;
use transdg::{Graph, ParamStore, Tensor};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn elementwise_composites_pass_grad_check(
        seed in any::<u64>(),
        rows in 1usize..4,
        cols in 1usize..4,
        k in 2usize..5,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let a = store.add("a", uniform(&mut rng, &[rows, cols], 1.0));
        let b = store.add("b", uniform(&mut rng, &[cols, k], 1.0));
        let bias = store.add("bias", uniform(&mut rng, &[1, k], 1.0));
        let emb = store.add_embedding("emb", uniform(&mut rng, &[5, k], 1.0));
        let mask: Vec<bool> = (0..k).map(|j| j == 0 || rng.gen_bool(0.6)).collect();
        let ids: Vec<usize> = (0..rows).map(|_| rng.gen_range(1..5)).collect();
        let targets: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..k)).collect();
        let err = grad_check(&mut store, 1e-6, |g, s| {
            let (av, bv, biv) = (g.param(s, a), g.param(s, b), g.param(s, bias));
            let x = g.matmul(av, bv)?;
            let x = g.add_row(x, biv)?;
            let t = g.tanh(x);
            let table = g.param(s, emb);
            let e = g.gather(table, &ids)?;
            let m = g.mul(t, e)?;
            let sig = g.sigmoid(m);
            let w = g.masked_softmax(sig, Some(&mask))?;
            let both = g.concat(&[w, t])?;
            let stacked = g.concat_rows(&[both, both])?;
            let mean = g.mean_axis(stacked, 0)?;
            let sq = g.mul(mean, mean)?;
            let sq = g.sum(sq);
            let ce = g.cross_entropy(x, &targets)?;
            let ce = g.scale(ce, 0.5);
            Ok(g.sub(sq, ce)?)
        })
        .unwrap();
        prop_assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn recurrent_and_attention_layers_pass_grad_check(
        seed in any::<u64>(),
        len in 1usize..4,
        input in 1usize..4,
        hidden in 1usize..4,
        layers in 1usize..3,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let stack = StackedGru::new(&mut store, "enc", input, hidden, layers, 0.5, &mut rng);
        let bi = BiGru::new(&mut store, "bi", input, hidden, 0.5, &mut rng);
        let att = Attention::new(&mut store, "att", 2 * hidden, hidden, 3, 0.5, &mut rng);
        let mlp = Mlp::new(&mut store, "mlp", hidden, 3, 0.5, &mut rng);
        let x = uniform(&mut rng, &[len, input], 1.0);
        let mask: Vec<bool> = (0..len).map(|j| j == len - 1 || rng.gen_bool(0.5)).collect();
        let err = grad_check(&mut store, 1e-6, |g, s| {
            let xv = g.constant(x.clone());
            let h = stack.encode(g, s, xv)?;
            let q = bi.forward(g, s, xv)?;
            let keys = att.prepare(g, s, h)?;
            let (ctx, _) = att.attend(g, s, q, &keys, Some(&mask))?;
            let score = mlp.forward(g, s, ctx)?;
            Ok(g.sum(score))
        })
        .unwrap();
        prop_assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn masked_softmax_is_normalized_and_zero_where_masked(
        seed in any::<u64>(),
        rows in 1usize..5,
        cols in 1usize..9,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let keep_at = rng.gen_range(0..cols);
        let mask: Vec<bool> = (0..cols).map(|j| j == keep_at || rng.gen_bool(0.5)).collect();
        let mut g = Graph::no_grad();
        let x = g.constant(Tensor::matrix(rows, cols, values).unwrap());
        let w = g.masked_softmax(x, Some(&mask)).unwrap();
        for r in 0..rows {
            let row = g.value(w).row_slice(r);
            let total: f64 = row.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            for (j, &p) in row.iter().enumerate() {
                if mask[j] {
                    prop_assert!(p >= 0.0);
                } else {
                    prop_assert_eq!(p, 0.0);
                }
            }
        }
    }

    #[test]
    fn dropout_is_identity_at_rate_zero_or_outside_training(
        seed in any::<u64>(),
        rate in 0.0f64..0.95,
        n in 1usize..20,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = uniform(&mut rng, &[1, n], 1.0);
        let mut g = Graph::new();
        let x = g.input(t.clone(), true);
        let off = g.dropout(x, rate, false, &mut rng).unwrap();
        let zero = g.dropout(x, 0.0, true, &mut rng).unwrap();
        prop_assert_eq!(g.value(off), &t);
        prop_assert_eq!(g.value(zero), &t);
    }

    #[test]
    fn argmax_ignores_a_constant_shift(
        values in prop::collection::vec(-10.0f64..10.0, 1..12),
        shift in -100.0f64..100.0,
    ) {
        let shifted: Vec<f64> = values.iter().map(|v| v + shift).collect();
        prop_assert_eq!(argmax(&values), argmax(&shifted));
        let mut g = Graph::no_grad();
        let x = g.constant(Tensor::row(values.clone()));
        let p = g.softmax(x);
        prop_assert_eq!(argmax(g.value(p).data()), argmax(&values));
    }
}
