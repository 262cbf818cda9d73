//! Token vocabularies.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::DataError;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const GO: usize = 2;
pub const EOS: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<go>", "<eos>"];

/// Dummy dependency token standing for an entity mention.
pub const ENTITY_TOKEN: &str = "<E>";

/// Word vocabulary with reserved ids PAD=0, UNK=1, GO=2, EOS=3.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Keeps the most frequent tokens, ties broken lexicographically, so that
    /// the table (reserved entries included) holds at most `max_size` entries.
    pub fn build<I, S>(tokens: I, max_size: usize) -> Result<Vocab, DataError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for t in tokens {
            let t = t.as_ref();
            if RESERVED.contains(&t) {
                continue;
            }
            *counts.entry(t.to_string()).or_default() += 1;
        }
        if counts.is_empty() {
            return Err(DataError::EmptyCorpus);
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        // BTreeMap order is lexicographic; a stable sort by count keeps it for ties.
        ranked.sort_by_key(|e| std::cmp::Reverse(e.1));
        let keep = max_size.saturating_sub(RESERVED.len());
        let list = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().take(keep).map(|(t, _)| t))
            .collect();
        Ok(Vocab::from_list(list))
    }

    fn from_list(tokens: Vec<String>) -> Vocab {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or UNK.
    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Decodes up to (excluding) the first EOS, skipping PAD and GO.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != GO)
            .map(|&i| self.token(i).to_string())
            .collect()
    }

    /// Adds a token if absent and returns its id.
    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(id) = self.get(token) {
            return id;
        }
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = String;

    fn try_from(tokens: Vec<String>) -> Result<Self, Self::Error> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err("vocabulary must start with the reserved tokens".into());
        }
        let v = Vocab::from_list(tokens);
        if v.index.len() != v.tokens.len() {
            return Err("vocabulary has duplicate tokens".into());
        }
        Ok(v)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

/// Vocabulary of dependency-path tokens: words, directed labels and the
/// entity placeholder, which is always present.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DependencyVocab(Vocab);

impl DependencyVocab {
    pub fn build<I, S>(tokens: I, max_size: usize) -> Result<Self, DataError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        // One slot stays free for the entity placeholder.
        let mut v = Vocab::build(
            tokens.into_iter().filter(|t| t.as_ref() != ENTITY_TOKEN),
            max_size.max(RESERVED.len() + 1) - 1,
        )?;
        v.insert(ENTITY_TOKEN);
        Ok(DependencyVocab(v))
    }

    pub fn entity_id(&self) -> usize {
        self.0.id(ENTITY_TOKEN)
    }

    pub fn vocab(&self) -> &Vocab {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        self.0.encode(tokens)
    }
}

/// KB relation names, each treated as a single unit. Ids follow sorted order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct RelationVocab {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl RelationVocab {
    pub fn new<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut names: Vec<String> = names.into_iter().map(|s| s.as_ref().to_string()).collect();
        names.sort();
        names.dedup();
        Self::from(names)
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

impl From<Vec<String>> for RelationVocab {
    fn from(names: Vec<String>) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        RelationVocab { names, index }
    }
}

impl From<RelationVocab> for Vec<String> {
    fn from(v: RelationVocab) -> Self {
        v.names
    }
}

/// The three vocabularies a model is built against.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabularies {
    pub words: Vocab,
    pub deps: DependencyVocab,
    pub relations: RelationVocab,
}

impl Vocabularies {
    pub fn build<'a, W, D, R>(words: W, deps: D, relations: R, max_words: usize, max_deps: usize) -> Result<Self, DataError>
    where
        W: IntoIterator<Item = &'a str>,
        D: IntoIterator<Item = &'a str>,
        R: IntoIterator<Item = &'a str>,
    {
        Ok(Vocabularies {
            words: Vocab::build(words, max_words)?,
            deps: DependencyVocab::build(deps, max_deps)?,
            relations: RelationVocab::new(relations),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keeps_most_frequent() {
        let tokens = ["a", "b", "c", "a", "b", "a"];
        let v = Vocab::build(tokens, 2 + RESERVED.len()).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.get("a"), Some(4));
        assert_eq!(v.get("b"), Some(5));
        assert_eq!(v.get("c"), None);
        assert_eq!(v.id("zebra"), UNK);
    }

    #[test]
    fn ties_are_lexicographic() {
        let v = Vocab::build(["y", "x", "z", "x", "y"], 5).unwrap();
        assert_eq!(v.token(4), "x");
        let w = Vocab::build(["y", "x", "z", "x", "y"], 5).unwrap();
        assert_eq!(v, w);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(
            Vocab::build(Vec::<String>::new(), 10),
            Err(DataError::EmptyCorpus)
        ));
    }

    #[test]
    fn dependency_vocab_always_has_entity_token() {
        let v = DependencyVocab::build(["who", "who", "actor"], 6).unwrap();
        assert_eq!(v.len(), 6);
        assert!(v.vocab().get(ENTITY_TOKEN).is_some());
        assert!(v.vocab().get("who").is_some());
    }

    #[test]
    fn serde_round_trip() {
        let v = Vocab::build(["a", "b"], 10).unwrap();
        let s = serde_json::to_string(&v).unwrap();
        let back: Vocab = serde_json::from_str(&s).unwrap();
        assert_eq!(v, back);
    }
}
