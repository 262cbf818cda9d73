use std::collections::BTreeSet;

use proptest::prelude::*;

use transdg::corpus::{format_dialog, format_kb, format_qa, load_dialog, load_kb, load_qa, DialogRecord, KbRecord, QaRecord};
use transdg::kb::{sample_negatives, EncodedKb, FactId, FactIndex, KbTriple};
use transdg::retrieval::TfIdfIndex;
use transdg::synthetic::{make_synthetic, SyntheticSizes};
use transdg::vocab::{DependencyVocab, Vocab};

fn tokens(max: usize) -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec("[a-z]{1,6}", 1..max)
}

fn fact_ids(min: usize) -> impl Strategy<Value = Vec<FactId>> {
    prop::collection::vec((0u32..500).prop_map(FactId), min..4)
}

fn qa_record() -> impl Strategy<Value = QaRecord> {
    (tokens(7), tokens(7), fact_ids(1), fact_ids(0)).prop_map(|(question, dependency, gold, negatives)| {
        let negatives = negatives.into_iter().filter(|n| !gold.contains(n)).collect();
        QaRecord {
            question,
            dependency,
            gold,
            negatives,
        }
    })
}

fn dialog_record() -> impl Strategy<Value = DialogRecord> {
    (tokens(7), tokens(7), tokens(9), fact_ids(0)).prop_map(|(post, post_dependency, response, facts)| DialogRecord {
        post,
        post_dependency,
        response,
        facts,
    })
}

fn kb_record() -> impl Strategy<Value = KbRecord> {
    (0u32..1000, tokens(4), "[A-Z][a-z]{1,8}", tokens(4)).prop_map(|(id, subject, relation, object)| KbRecord {
        id: FactId(id),
        subject,
        relation,
        object,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn corpus_files_round_trip(
        qa in prop::collection::vec(qa_record(), 0..6),
        dialog in prop::collection::vec(dialog_record(), 0..6),
        kb in prop::collection::vec(kb_record(), 0..6),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let (pq, pd, pk) = (dir.path().join("qa.tsv"), dir.path().join("d.tsv"), dir.path().join("kb.tsv"));
        std::fs::write(&pq, format_qa(&qa)).unwrap();
        std::fs::write(&pd, format_dialog(&dialog)).unwrap();
        std::fs::write(&pk, format_kb(&kb)).unwrap();
        prop_assert_eq!(load_qa(&pq).unwrap(), qa);
        prop_assert_eq!(load_dialog(&pd).unwrap(), dialog);
        prop_assert_eq!(load_kb(&pk).unwrap(), kb);
    }

    #[test]
    fn encoded_ids_stay_inside_the_vocabularies(
        dialog in prop::collection::vec(dialog_record(), 1..8),
        qa in prop::collection::vec(qa_record(), 1..8),
        max_words in 5usize..30,
        max_deps in 2usize..10,
    ) {
        let words = Vocab::build(
            dialog.iter().flat_map(|d| d.post.iter().chain(&d.response)).chain(qa.iter().flat_map(|q| &q.question)),
            max_words,
        )
        .unwrap();
        let deps = DependencyVocab::build(
            dialog.iter().flat_map(|d| &d.post_dependency).chain(qa.iter().flat_map(|q| &q.dependency)),
            max_deps,
        )
        .unwrap();
        for d in &dialog {
            let ex = d.encode(&words, &deps);
            prop_assert!(ex.post.iter().chain(&ex.response).all(|&i| i < words.len()));
            prop_assert!(ex.post_dependency.iter().all(|&i| i < deps.len()));
        }
        for q in &qa {
            let ex = q.encode(&words, &deps);
            prop_assert!(ex.question.iter().all(|&i| i < words.len()));
            prop_assert!(ex.dependency.iter().all(|&i| i < deps.len()));
        }
    }

    #[test]
    fn fact_candidates_are_distinct_capped_and_overlapping(
        facts in prop::collection::vec(
            (prop::collection::vec(0usize..12, 1..3), prop::collection::vec(0usize..12, 1..3)),
            1..20,
        ),
        query in prop::collection::vec(0usize..14, 0..6),
        cap in 1usize..8,
    ) {
        // ids 0..4 are reserved tokens and id 4 is a stop word
        let mut names = vec!["the".to_string()];
        names.extend((0..9).map(|i| format!("w{i}")));
        let words = Vocab::build(names.iter(), 100).unwrap();
        prop_assert_eq!(words.get("the"), Some(4));
        let kb = EncodedKb::from_triples(
            facts
                .iter()
                .enumerate()
                .map(|(i, (s, o))| KbTriple { id: FactId(i as u32), subject: s.clone(), relation: 0, object: o.clone() })
                .collect(),
        );
        let index = FactIndex::build(&kb, &words);
        let found = index.candidates_for(&query, cap);
        prop_assert!(found.len() <= cap);
        prop_assert_eq!(found.iter().collect::<BTreeSet<_>>().len(), found.len());
        for id in found {
            let t = kb.get(id).unwrap();
            prop_assert!(t.surface_words().any(|w| w > 4 && query.contains(&w)));
        }
    }

    #[test]
    fn negatives_avoid_gold(
        total in 2u32..60,
        gold in prop::collection::btree_set(0u32..60, 1..4),
        count in 1usize..30,
        seed in any::<u64>(),
    ) {
        let all: Vec<FactId> = (0..total).map(FactId).collect();
        let gold: Vec<FactId> = gold.into_iter().map(FactId).collect();
        let pool = all.iter().filter(|id| !gold.contains(id)).count();
        match sample_negatives(&all, &gold, count, seed) {
            Ok(neg) => {
                prop_assert_eq!(neg.len(), count.min(pool));
                prop_assert!(neg.iter().all(|n| !gold.contains(n)));
                prop_assert_eq!(neg.iter().collect::<BTreeSet<_>>().len(), neg.len());
                prop_assert_eq!(&neg, &sample_negatives(&all, &gold, count, seed).unwrap());
            }
            Err(_) => prop_assert_eq!(pool, 0),
        }
    }

    #[test]
    fn retrieval_results_are_bounded_and_sorted(
        posts in prop::collection::vec(prop::collection::vec("[a-e]{1,2}", 1..6), 1..15),
        query in prop::collection::vec("[a-f]{1,2}", 0..6),
        k in 1usize..5,
    ) {
        let responses: Vec<Vec<String>> = posts.iter().map(|p| p.iter().rev().cloned().collect()).collect();
        let index = TfIdfIndex::build(posts.iter().map(Vec::as_slice).zip(responses.iter().map(Vec::as_slice)), k);
        let exclude = Some(query.len() % posts.len());
        let found = index.top_k(&query, exclude);
        prop_assert!(found.len() <= k);
        for pair in found.windows(2) {
            prop_assert!(pair[0].cosine >= pair[1].cosine);
        }
        for r in &found {
            prop_assert!((0.0..=1.0).contains(&r.cosine));
            prop_assert!(Some(r.post_id) != exclude);
            prop_assert_eq!(&r.response, &responses[r.post_id]);
        }
    }
}

#[test]
fn no_training_pair_retrieves_itself() {
    let corpus = make_synthetic(3, SyntheticSizes::default());
    let train = &corpus.dialog_train;
    let index = TfIdfIndex::build(train.iter().map(|d| (d.post.as_slice(), d.response.as_slice())), 3);
    for (i, d) in train.iter().enumerate() {
        let found = index.top_k(&d.post, Some(i));
        assert!(found.len() <= 3);
        assert!(found.iter().all(|r| r.post_id != i), "pair {i} retrieved itself");
    }
}
