//! Knowledge triples, word-to-fact retrieval and negative sampling.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{EntityLexicon, KbRecord};
use crate::error::{DataError, Error};
use crate::tensor::Tensor;
use crate::vocab::{RelationVocab, Vocab, RESERVED};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FactId(pub u32);

impl fmt::Display for FactId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A fact with subject and object as word ids and the relation as a unit id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KbTriple {
    pub id: FactId,
    pub subject: Vec<usize>,
    pub relation: usize,
    pub object: Vec<usize>,
}

impl KbTriple {
    /// Subject words followed by object words.
    pub fn surface_words(&self) -> impl Iterator<Item = usize> + '_ {
        self.subject.iter().chain(&self.object).copied()
    }
}

/// The raw knowledge base plus its relation vocabulary.
#[derive(Clone, Debug)]
pub struct KnowledgeBase {
    records: Vec<KbRecord>,
    position: BTreeMap<FactId, usize>,
    relations: RelationVocab,
}

impl KnowledgeBase {
    pub fn new(records: Vec<KbRecord>) -> Result<Self, DataError> {
        let mut position = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            if position.insert(r.id, i).is_some() {
                return Err(DataError::Parse {
                    path: "<kb>".into(),
                    line: i + 1,
                    message: format!("duplicate fact id {}", r.id),
                });
            }
        }
        let relations = RelationVocab::new(records.iter().map(|r| r.relation.as_str()));
        Ok(KnowledgeBase {
            records,
            position,
            relations,
        })
    }

    pub fn records(&self) -> &[KbRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: FactId) -> Option<&KbRecord> {
        self.position.get(&id).map(|&i| &self.records[i])
    }

    pub fn contains(&self, id: FactId) -> bool {
        self.position.contains_key(&id)
    }

    /// Fact ids in ascending order.
    pub fn ids(&self) -> Vec<FactId> {
        self.position.keys().copied().collect()
    }

    pub fn relations(&self) -> &RelationVocab {
        &self.relations
    }

    /// Every subject and object surface form.
    pub fn entity_lexicon(&self) -> EntityLexicon {
        EntityLexicon::new(
            self.records
                .iter()
                .flat_map(|r| [r.subject.clone(), r.object.clone()]),
        )
    }

    /// All entity words, for vocabulary construction.
    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.records
            .iter()
            .flat_map(|r| r.subject.iter().chain(&r.object))
            .map(String::as_str)
    }

    /// Encodes every fact against `words` and a relation vocabulary. Unknown
    /// relations are a contract violation.
    pub fn encode(&self, words: &Vocab, relations: &RelationVocab) -> Result<EncodedKb, Error> {
        let mut triples = BTreeMap::new();
        for r in &self.records {
            let relation = relations.get(&r.relation).ok_or_else(|| {
                Error::Contract(format!("fact {} has unknown relation `{}`", r.id, r.relation))
            })?;
            triples.insert(
                r.id,
                KbTriple {
                    id: r.id,
                    subject: words.encode(&r.subject),
                    relation,
                    object: words.encode(&r.object),
                },
            );
        }
        Ok(EncodedKb { triples })
    }
}

/// Facts encoded against one word vocabulary, keyed by id.
#[derive(Clone, Debug)]
pub struct EncodedKb {
    triples: BTreeMap<FactId, KbTriple>,
}

impl EncodedKb {
    /// Builds from already encoded facts; a later duplicate id replaces an earlier one.
    pub fn from_triples(triples: Vec<KbTriple>) -> Self {
        EncodedKb {
            triples: triples.into_iter().map(|t| (t.id, t)).collect(),
        }
    }

    pub fn get(&self, id: FactId) -> Option<&KbTriple> {
        self.triples.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &KbTriple> {
        self.triples.values()
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn ids(&self) -> Vec<FactId> {
        self.triples.keys().copied().collect()
    }
}

/// Inverted index from word id to the facts whose subject or object contains it.
#[derive(Clone, Debug)]
pub struct FactIndex {
    postings: BTreeMap<usize, Vec<FactId>>,
    ignored: HashSet<usize>,
    entity_words: BTreeMap<FactId, BTreeSet<usize>>,
}

impl FactIndex {
    pub fn build(kb: &EncodedKb, words: &Vocab) -> Self {
        let mut ignored: HashSet<usize> = (0..RESERVED.len()).collect();
        ignored.extend(crate::corpus::STOP_WORDS.iter().filter_map(|w| words.get(w)));
        let mut postings: BTreeMap<usize, BTreeSet<FactId>> = BTreeMap::new();
        let mut entity_words = BTreeMap::new();
        for t in kb.iter() {
            let set: BTreeSet<usize> = t.surface_words().filter(|w| !ignored.contains(w)).collect();
            for &w in &set {
                postings.entry(w).or_default().insert(t.id);
            }
            entity_words.insert(t.id, set);
        }
        FactIndex {
            postings: postings
                .into_iter()
                .map(|(w, ids)| (w, ids.into_iter().collect()))
                .collect(),
            ignored,
            entity_words,
        }
    }

    pub fn postings(&self, word: usize) -> &[FactId] {
        self.postings.get(&word).map_or(&[], Vec::as_slice)
    }

    /// Facts sharing at least one non-stop word with `tokens`, ordered by
    /// number of distinct matching words (descending) then id, at most `cap`.
    pub fn candidates_for(&self, tokens: &[usize], cap: usize) -> Vec<FactId> {
        let query: BTreeSet<usize> = tokens.iter().copied().filter(|w| !self.ignored.contains(w)).collect();
        let mut overlap: BTreeMap<FactId, usize> = BTreeMap::new();
        for w in query {
            for &id in self.postings(w) {
                *overlap.entry(id).or_default() += 1;
            }
        }
        let mut ranked: Vec<(FactId, usize)> = overlap.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.into_iter().take(cap).map(|(id, _)| id).collect()
    }

    /// Distinct non-stop entity words of a fact.
    pub fn entity_words(&self, id: FactId) -> Option<&BTreeSet<usize>> {
        self.entity_words.get(&id)
    }
}

/// Mean of subject word vectors followed by mean of object word vectors.
pub fn entity_pair_embedding(triple: &KbTriple, table: &Tensor) -> Vec<f64> {
    let d = table.cols();
    let mean = |ids: &[usize]| {
        let mut v = vec![0.0; d];
        for &i in ids {
            for (o, x) in v.iter_mut().zip(table.row_slice(i)) {
                *o += x;
            }
        }
        v.iter_mut().for_each(|o| *o /= ids.len() as f64);
        v
    };
    let mut out = mean(&triple.subject);
    out.extend(mean(&triple.object));
    out
}

/// Uniform sample without replacement from `all \ gold`, deterministic in
/// `seed`. When fewer than `count` non-gold facts exist the sample is clipped
/// to what is available; no non-gold fact at all is a configuration error.
pub fn sample_negatives(all: &[FactId], gold: &[FactId], count: usize, seed: u64) -> Result<Vec<FactId>, Error> {
    let pool: Vec<FactId> = all.iter().copied().filter(|id| !gold.contains(id)).collect();
    if pool.is_empty() {
        return Err(Error::Config(format!(
            "cannot sample negatives: knowledge base of {} facts has none outside the {} gold facts",
            all.len(),
            gold.len()
        )));
    }
    let take = if pool.len() < count {
        log::warn!("only {} negative facts available, {} requested", pool.len(), count);
        pool.len()
    } else {
        count
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(index::sample(&mut rng, pool.len(), take)
        .into_iter()
        .map(|i| pool[i])
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn rec(id: u32, s: &str, r: &str, o: &str) -> KbRecord {
        KbRecord {
            id: FactId(id),
            subject: toks(s),
            relation: r.into(),
            object: toks(o),
        }
    }

    fn fixture() -> (KnowledgeBase, Vocab, EncodedKb, FactIndex) {
        let kb = KnowledgeBase::new(vec![
            rec(1, "ost", "IsA", "song"),
            rec(2, "dog", "IsA", "animal"),
            rec(3, "dog", "AtLocation", "farm"),
            rec(4, "the cat", "IsA", "animal"),
        ])
        .unwrap();
        let words = Vocab::build(kb.words().chain(["the", "i", "like", "hello"]), 100).unwrap();
        let enc = kb.encode(&words, kb.relations()).unwrap();
        let index = FactIndex::build(&enc, &words);
        (kb, words, enc, index)
    }

    #[test]
    fn post_word_finds_fact() {
        let (_, words, _, index) = fixture();
        let q = words.encode(&toks("i like the ost"));
        assert_eq!(index.candidates_for(&q, 50), vec![FactId(1)]);
    }

    #[test]
    fn no_kb_words_gives_nothing() {
        let (_, words, _, index) = fixture();
        assert!(index.candidates_for(&words.encode(&toks("hello the i")), 50).is_empty());
    }

    #[test]
    fn ordering_by_overlap_then_id_and_cap() {
        let (_, words, _, index) = fixture();
        let q = words.encode(&toks("dog animal"));
        assert_eq!(index.candidates_for(&q, 50), vec![FactId(2), FactId(3), FactId(4)]);
        let q = words.encode(&toks("dog"));
        assert_eq!(index.candidates_for(&q, 1), vec![FactId(2)]);
    }

    #[test]
    fn entity_pair_embedding_means_then_concats() {
        let t = KbTriple {
            id: FactId(0),
            subject: vec![1, 2],
            relation: 0,
            object: vec![3],
        };
        let table = Tensor::matrix(4, 2, vec![0.0, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(entity_pair_embedding(&t, &table), vec![2.0, 3.0, 5.0, 6.0]);
        assert_eq!(entity_pair_embedding(&t, &Tensor::zeros(&[4, 2])), vec![0.0; 4]);
    }

    #[test]
    fn negatives_are_distinct_and_exclude_gold() {
        let all: Vec<FactId> = (0..100).map(FactId).collect();
        let gold = [FactId(5)];
        let neg = sample_negatives(&all, &gold, 20, 9).unwrap();
        assert_eq!(neg.len(), 20);
        assert!(!neg.contains(&FactId(5)));
        let set: BTreeSet<_> = neg.iter().collect();
        assert_eq!(set.len(), 20);
        assert_eq!(neg, sample_negatives(&all, &gold, 20, 9).unwrap());
    }

    #[test]
    fn negatives_clip_at_boundary() {
        let all: Vec<FactId> = (0..5).map(FactId).collect();
        let gold: Vec<FactId> = (0..4).map(FactId).collect();
        assert_eq!(sample_negatives(&all, &gold, 20, 1).unwrap(), vec![FactId(4)]);
        assert!(matches!(sample_negatives(&all, &all, 1, 1), Err(Error::Config(_))));
    }

    #[test]
    fn duplicate_fact_ids_are_rejected() {
        assert!(KnowledgeBase::new(vec![rec(1, "a", "r", "b"), rec(1, "c", "r", "d")]).is_err());
    }
}
