//! Turning corpus records into model inputs: vocabularies, retrieval
//! candidates and candidate facts per post.

use std::collections::BTreeSet;

use crate::corpus::{DialogRecord, QaRecord};
use crate::dialog::DialogInstance;
use crate::error::{Error, Result};
use crate::kb::{EncodedKb, FactIndex, KnowledgeBase};
use crate::retrieval::TfIdfIndex;
use crate::vocab::{Vocabularies, EOS};

/// Builds one set of vocabularies over the KB, the QA questions and the
/// training dialogues, so that the matcher and the dialogue model share ids.
pub fn build_vocabularies(
    kb: &KnowledgeBase,
    qa: &[QaRecord],
    dialog: &[DialogRecord],
    max_words: usize,
    max_deps: usize,
) -> Result<Vocabularies> {
    let words = kb
        .words()
        .chain(qa.iter().flat_map(|q| q.question.iter().map(String::as_str)))
        .chain(dialog.iter().flat_map(|d| d.post.iter().chain(&d.response).map(String::as_str)));
    let deps = qa
        .iter()
        .flat_map(|q| q.dependency.iter())
        .chain(dialog.iter().flat_map(|d| d.post_dependency.iter()))
        .map(String::as_str);
    let relations: Vec<&str> = (0..kb.relations().len()).map(|i| kb.relations().name(i)).collect();
    Ok(Vocabularies::build(words, deps, relations, max_words, max_deps)?)
}

pub fn retrieval_index(train: &[DialogRecord], k: usize) -> TfIdfIndex {
    TfIdfIndex::build(train.iter().map(|d| (d.post.as_slice(), d.response.as_slice())), k)
}

/// Model inputs for a list of posts plus, per post, the entity words of its
/// candidate facts (the support of the entity score).
#[derive(Clone, Debug, Default)]
pub struct Prepared {
    pub instances: Vec<DialogInstance>,
    pub entity_words: Vec<BTreeSet<String>>,
}

/// Everything needed to look up retrieval candidates and facts for a post.
pub struct Lookup<'a> {
    pub vocabs: &'a Vocabularies,
    pub kb: &'a EncodedKb,
    pub facts: &'a FactIndex,
    pub index: &'a TfIdfIndex,
    pub fact_cap: usize,
}

impl Lookup<'_> {
    /// `self_id` is the post's own position in the retrieval index, excluded
    /// from its candidates.
    pub fn instance(
        &self,
        post: &[String],
        dependency: &[String],
        response: Option<&[String]>,
        self_id: Option<usize>,
    ) -> Result<(DialogInstance, BTreeSet<String>)> {
        let words = &self.vocabs.words;
        let post_ids = words.encode(post);
        let retrieved = self
            .index
            .top_k(post, self_id)
            .into_iter()
            .map(|r| words.encode(&r.response))
            .collect();
        let mut facts = Vec::new();
        let mut entity_words = BTreeSet::new();
        for id in self.facts.candidates_for(&post_ids, self.fact_cap) {
            let triple = self
                .kb
                .get(id)
                .ok_or_else(|| Error::Contract(format!("fact index refers to unknown fact {id}")))?;
            facts.push(triple.clone());
            if let Some(set) = self.facts.entity_words(id) {
                entity_words.extend(set.iter().map(|&w| words.token(w).to_string()));
            }
        }
        let response = response.map_or_else(Vec::new, |r| {
            let mut ids = words.encode(r);
            ids.push(EOS);
            ids
        });
        let instance = DialogInstance {
            post: post_ids,
            deps: self.vocabs.deps.encode(dependency),
            response,
            retrieved,
            facts,
        };
        Ok((instance, entity_words))
    }

    /// Instances for dialogue records; `indexed` marks records that are the
    /// retrieval index itself, in order.
    pub fn prepare(&self, records: &[DialogRecord], indexed: bool) -> Result<Prepared> {
        let mut out = Prepared::default();
        for (i, r) in records.iter().enumerate() {
            let (inst, ents) =
                self.instance(&r.post, &r.post_dependency, Some(&r.response), indexed.then_some(i))?;
            out.instances.push(inst);
            out.entity_words.push(ents);
        }
        Ok(out)
    }
}
