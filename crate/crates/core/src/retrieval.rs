//! TF-IDF retrieval of similar training posts, whose responses guide the
//! encoder's attention.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::DataError;
use crate::tensor::Tensor;
use crate::vocab::{PAD, UNK};

pub const INDEX_FORMAT_VERSION: u32 = 1;

/// Sparse, L2-normalized term weights over the indexed posts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TfIdfIndex {
    pub version: u32,
    pub k: usize,
    doc_count: usize,
    doc_freq: BTreeMap<String, usize>,
    /// term -> (post id, weight), ascending post id.
    postings: BTreeMap<String, Vec<(usize, f64)>>,
    responses: Vec<Vec<String>>,
}

/// A retrieved response with its cosine similarity to the query.
#[derive(Clone, Debug, PartialEq)]
pub struct Retrieved {
    pub post_id: usize,
    pub cosine: f64,
    pub response: Vec<String>,
}

fn term_counts(tokens: &[String]) -> BTreeMap<&str, usize> {
    let mut tf = BTreeMap::new();
    for t in tokens {
        *tf.entry(t.as_str()).or_default() += 1;
    }
    tf
}

impl TfIdfIndex {
    /// Indexes `(post, response)` pairs; post ids are positions in the input.
    pub fn build<'a, I>(pairs: I, k: usize) -> Self
    where
        I: IntoIterator<Item = (&'a [String], &'a [String])>,
    {
        let pairs: Vec<(&[String], &[String])> = pairs.into_iter().collect();
        let mut doc_freq: BTreeMap<String, usize> = BTreeMap::new();
        for (post, _) in &pairs {
            for term in term_counts(post).keys() {
                *doc_freq.entry(term.to_string()).or_default() += 1;
            }
        }
        let mut index = TfIdfIndex {
            version: INDEX_FORMAT_VERSION,
            k,
            doc_count: pairs.len(),
            doc_freq,
            postings: BTreeMap::new(),
            responses: pairs.iter().map(|(_, r)| r.to_vec()).collect(),
        };
        for (id, (post, _)) in pairs.iter().enumerate() {
            for (term, w) in index.vector(post) {
                index.postings.entry(term).or_default().push((id, w));
            }
        }
        index
    }

    pub fn idf(&self, term: &str) -> Option<f64> {
        let df = *self.doc_freq.get(term)?;
        Some(((self.doc_count as f64 + 1.0) / (df as f64 + 1.0)).ln() + 1.0)
    }

    /// Normalized `tf * idf` weights of the indexed terms in `tokens`.
    pub fn vector(&self, tokens: &[String]) -> Vec<(String, f64)> {
        let mut v: Vec<(String, f64)> = term_counts(tokens)
            .into_iter()
            .filter_map(|(t, tf)| self.idf(t).map(|idf| (t.to_string(), tf as f64 * idf)))
            .collect();
        let norm = v.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|(_, w)| *w /= norm);
        }
        v
    }

    pub fn len(&self) -> usize {
        self.doc_count
    }

    pub fn is_empty(&self) -> bool {
        self.doc_count == 0
    }

    /// Cosine ranking of indexed posts against `query`; ties go to the lower
    /// post id; posts with zero similarity and `exclude` are never returned.
    pub fn top_k(&self, query: &[String], exclude: Option<usize>) -> Vec<Retrieved> {
        let mut scores: BTreeMap<usize, f64> = BTreeMap::new();
        for (term, qw) in self.vector(query) {
            for &(id, w) in self.postings.get(&term).map_or(&[][..], Vec::as_slice) {
                *scores.entry(id).or_default() += qw * w;
            }
        }
        let mut ranked: Vec<(usize, f64)> = scores
            .into_iter()
            .filter(|&(id, s)| s > 0.0 && Some(id) != exclude)
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked
            .into_iter()
            .take(self.k)
            .map(|(post_id, cosine)| Retrieved {
                post_id,
                cosine: cosine.min(1.0),
                response: self.responses[post_id].clone(),
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let json = serde_json::to_string(self).map_err(|e| DataError::Checkpoint(e.to_string()))?;
        crate::corpus::write_file(path, &json)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        let index: TfIdfIndex =
            serde_json::from_str(&text).map_err(|e| DataError::Checkpoint(format!("{}: {e}", path.display())))?;
        if index.version != INDEX_FORMAT_VERSION {
            return Err(DataError::Checkpoint(format!(
                "{}: index format version {} is not supported",
                path.display(),
                index.version
            )));
        }
        Ok(index)
    }
}

/// Mean word vector of a response; PAD ids are skipped, UNK rows count.
pub fn candidate_embedding(response: &[usize], table: &Tensor) -> Vec<f64> {
    let d = table.cols();
    let ids: Vec<usize> = response.iter().copied().filter(|&i| i != PAD).collect();
    let mut v = vec![0.0; d];
    for &i in &ids {
        let row = if i < table.rows() { i } else { UNK };
        for (o, x) in v.iter_mut().zip(table.row_slice(row)) {
            *o += x;
        }
    }
    if !ids.is_empty() {
        v.iter_mut().for_each(|o| *o /= ids.len() as f64);
    }
    v
}
