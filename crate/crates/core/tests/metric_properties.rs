mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use transdg::metrics::{bleu, entity_score, perplexity};

use common::{brute_bleu, brute_entity, brute_perplexity};

const WORDS: [&str; 6] = ["the", "cat", "sat", "on", "a", "mat"];

fn sentence() -> impl Strategy<Value = Vec<&'static str>> {
    prop::collection::vec(prop::sample::select(&WORDS[..]), 0..8)
}

fn corpus() -> impl Strategy<Value = (Vec<Vec<&'static str>>, Vec<Vec<&'static str>>)> {
    (1usize..10).prop_flat_map(|n| {
        (
            prop::collection::vec(sentence(), n),
            prop::collection::vec(sentence(), n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn bleu_lies_in_unit_interval_and_ignores_pair_order(
        (cands, refs) in corpus(),
        max_n in 1usize..5,
        seed in any::<u64>(),
    ) {
        let b = bleu(&cands, &refs, max_n).unwrap();
        prop_assert!((0.0..=1.0).contains(&b), "bleu {b}");
        let mut order: Vec<usize> = (0..cands.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let pc: Vec<_> = order.iter().map(|&i| cands[i].clone()).collect();
        let pr: Vec<_> = order.iter().map(|&i| refs[i].clone()).collect();
        prop_assert!((bleu(&pc, &pr, max_n).unwrap() - b).abs() < 1e-12);
    }

    #[test]
    fn bleu_matches_enumeration((cands, refs) in corpus(), max_n in 1usize..5) {
        let fast = bleu(&cands, &refs, max_n).unwrap();
        let slow = brute_bleu(&cands, &refs, max_n);
        prop_assert!((fast - slow).abs() <= 1e-12, "{fast} vs {slow}");
    }

    #[test]
    fn entity_score_ignores_non_entity_edits(
        responses in prop::collection::vec(prop::collection::vec(0usize..10, 0..8), 1..8),
        edits in prop::collection::vec((0usize..10, 0usize..4), 0..20),
    ) {
        // tokens e0..e4 are entity words, o0..o4 are not
        let name = |i: usize| if i < 5 { format!("e{i}") } else { format!("o{}", i - 5) };
        let ents: BTreeSet<String> = (0..5).map(name).collect();
        let sets = vec![ents; responses.len()];
        let original: Vec<Vec<String>> = responses.iter().map(|r| r.iter().map(|&i| name(i)).collect()).collect();
        let mut edited = original.clone();
        for (k, (pos, what)) in edits.iter().enumerate() {
            let resp = &mut edited[k % responses.len()];
            let filler = format!("o{what}");
            match (resp.get(*pos).map(|t| t.starts_with('o')), k % 3) {
                (Some(true), 0) => resp[*pos] = filler,
                (Some(true), 1) => {
                    resp.remove(*pos);
                }
                _ => resp.push(filler),
            }
        }
        let before = entity_score(&original, &sets).unwrap();
        prop_assert_eq!(before, entity_score(&edited, &sets).unwrap());
        let refs: Vec<Vec<&str>> = original.iter().map(|r| r.iter().map(String::as_str).collect()).collect();
        prop_assert!((before - brute_entity(&refs, &sets)).abs() <= 1e-12);
    }

    #[test]
    fn perplexity_matches_enumeration(probs in prop::collection::vec(1e-6f64..1.0, 1..40)) {
        let nll: f64 = probs.iter().map(|p| -p.ln()).sum();
        let fast = perplexity(nll, probs.len());
        let slow = brute_perplexity(&probs);
        prop_assert!((fast - slow).abs() <= 1e-12 * slow.max(1.0));
    }
}
