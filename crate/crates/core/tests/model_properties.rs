mod common;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use transdg::dialog::{train_dialog, Ablation, DialogInstance, DialogTrainConfig};
use transdg::kb::{FactId, KbTriple};
use transdg::kbqa::{predict, KbqaDims, KbqaModel};
use transdg::vocab::RESERVED;
use transdg::ParamStore;

use common::{random_instance, toy_dims, toy_model};

const V: usize = 17;

fn ablation(bits: u8) -> Ablation {
    Ablation {
        no_qrt: bits & 1 != 0,
        no_kst: bits & 2 != 0,
        no_rga: bits & 4 != 0,
        no_ssd: bits & 8 != 0,
    }
}

fn is_distribution(row: &[f64]) -> bool {
    row.iter().all(|&w| w >= 0.0) && (row.iter().sum::<f64>() - 1.0).abs() < 1e-12
}

/// Applies a permutation of the non-reserved word ids to every table indexed
/// by word id: rows of the embedding and columns of the output projections.
fn permute_store(store: &mut ParamStore, perm: &[usize]) -> usize {
    let mut touched = 0;
    for id in store.ids().collect::<Vec<_>>() {
        let p = store.get_mut(id);
        let shape = p.value.shape().to_vec();
        if shape.len() != 2 {
            continue;
        }
        let (rows, cols) = (shape[0], shape[1]);
        let old = p.value.data().to_vec();
        let data = p.value.data_mut();
        if rows == V {
            for r in 0..rows {
                data[perm[r] * cols..(perm[r] + 1) * cols].copy_from_slice(&old[r * cols..(r + 1) * cols]);
            }
            touched += 1;
        } else if cols == V {
            for r in 0..rows {
                for c in 0..cols {
                    data[r * cols + perm[c]] = old[r * cols + c];
                }
            }
            touched += 1;
        }
    }
    touched
}

fn permute_instance(inst: &DialogInstance, perm: &[usize]) -> DialogInstance {
    let map = |ids: &[usize]| ids.iter().map(|&i| perm[i]).collect::<Vec<_>>();
    DialogInstance {
        post: map(&inst.post),
        deps: inst.deps.clone(),
        response: map(&inst.response),
        retrieved: inst.retrieved.iter().map(|r| map(r)).collect(),
        facts: inst
            .facts
            .iter()
            .map(|f| KbTriple {
                id: f.id,
                subject: map(&f.subject),
                relation: f.relation,
                object: map(&f.object),
            })
            .collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn attention_weight_families_are_distributions(
        seed in any::<u64>(),
        bits in 0u8..16,
        hidden in 2usize..5,
        layers in 1usize..3,
    ) {
        let (store, model) = toy_model(seed, V, toy_dims(3, hidden, layers), ablation(bits));
        let inst = random_instance(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed), V);
        let trace = model.attention_trace(&store, &inst).unwrap();
        let steps = inst.response.len();
        prop_assert_eq!(trace.post1.len(), steps);
        for family in [&trace.rga, &trace.post1, &trace.post2, &trace.draft, &trace.knowledge] {
            for row in family {
                prop_assert!(is_distribution(row), "{row:?}");
            }
        }
        let rga_rows = if bits & 4 == 0 { inst.retrieved.len() } else { 0 };
        prop_assert_eq!(trace.rga.len(), rga_rows);
        let knowledge_rows = if bits & 2 != 0 || inst.facts.is_empty() {
            0
        } else if bits & 8 != 0 {
            1
        } else {
            2
        };
        prop_assert_eq!(trace.knowledge.len(), knowledge_rows);
        for row in &trace.knowledge {
            prop_assert_eq!(row.len(), inst.facts.len());
        }
    }

    #[test]
    fn perplexity_survives_consistent_vocabulary_reordering(seed in any::<u64>(), bits in 0u8..16) {
        let (mut store, model) = toy_model(seed, V, toy_dims(3, 4, 1), ablation(bits));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_instance(&mut rng, V);
        let (before, n) = model.response_nll(&store, &inst).unwrap();

        let mut perm: Vec<usize> = (0..V).collect();
        perm[RESERVED.len()..].shuffle(&mut rng);
        prop_assert_eq!(permute_store(&mut store, &perm), 3);
        let (after, m) = model.response_nll(&store, &permute_instance(&inst, &perm)).unwrap();
        prop_assert_eq!(n, m);
        prop_assert!((before - after).abs() < 1e-9 * before.max(1.0), "{before} vs {after}");
    }

    #[test]
    fn matcher_scores_are_deterministic_and_argmax_is_shift_invariant(
        seed in any::<u64>(),
        facts in 1usize..6,
        shift in -50.0f64..50.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let dims = KbqaDims { word_dim: 3, hidden: 2, mlp_hidden: 4, init_scale: 0.5 };
        let model = KbqaModel::new(&mut store, dims, V, 6, 3, &mut rng);
        let triples: Vec<KbTriple> = (0..facts)
            .map(|i| KbTriple {
                id: FactId(10 - i as u32),
                subject: vec![rng.gen_range(4..V)],
                relation: rng.gen_range(0..3),
                object: vec![rng.gen_range(4..V), rng.gen_range(4..V)],
            })
            .collect();
        let refs: Vec<&KbTriple> = triples.iter().collect();
        let words: Vec<usize> = (0..rng.gen_range(1..5)).map(|_| rng.gen_range(4..V)).collect();
        let deps: Vec<usize> = (0..rng.gen_range(1..5)).map(|_| rng.gen_range(1..6)).collect();
        let scores = model.score_facts(&store, &words, &deps, &refs).unwrap();
        prop_assert_eq!(&scores, &model.score_facts(&store, &words, &deps, &refs).unwrap());
        let ids: Vec<FactId> = triples.iter().map(|t| t.id).collect();
        let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
        prop_assert_eq!(predict(&ids, &scores), predict(&ids, &shifted));
    }
}

#[test]
fn without_knowledge_transfer_the_model_still_learns() {
    let (mut store, model) = toy_model(4, V, toy_dims(4, 6, 1), ablation(2));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let data: Vec<DialogInstance> = (0..6).map(|_| random_instance(&mut rng, V)).collect();
    let cfg = DialogTrainConfig {
        learning_rate: 0.01,
        batch_size: 6,
        epochs: 5,
        dropout: 0.0,
        seed: 4,
    };
    let outcome = train_dialog(&model, &mut store, &data, &[], &cfg).unwrap();
    let totals: Vec<f64> = outcome.log.iter().map(|e| e.total).collect();
    assert!(totals.windows(2).all(|w| w[1] < w[0]), "{totals:?}");
}
