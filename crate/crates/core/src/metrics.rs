//! Perplexity, entity score and corpus BLEU.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// `exp(total_nll / tokens)`.
pub fn perplexity(total_nll: f64, tokens: usize) -> f64 {
    if tokens == 0 {
        return f64::NAN;
    }
    (total_nll / tokens as f64).exp()
}

/// Mean number of distinct response tokens that are words of the post's
/// candidate entities.
pub fn entity_score<S: AsRef<str>>(responses: &[Vec<S>], entity_words: &[BTreeSet<String>]) -> Result<f64, Error> {
    if responses.len() != entity_words.len() {
        return Err(Error::Contract(format!(
            "entity score: {} responses but {} candidate sets",
            responses.len(),
            entity_words.len()
        )));
    }
    if responses.is_empty() {
        return Ok(0.0);
    }
    let total: usize = responses
        .iter()
        .zip(entity_words)
        .map(|(resp, words)| {
            let distinct: BTreeSet<&str> = resp.iter().map(AsRef::as_ref).collect();
            distinct.iter().filter(|t| words.contains(**t)).count()
        })
        .sum();
    Ok(total as f64 / responses.len() as f64)
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_default() += 1;
        }
    }
    counts
}

/// Corpus-level BLEU up to order `max_n` with clipped n-gram precision, a
/// uniform geometric mean and the brevity penalty. No smoothing: a zero
/// precision at any order gives 0.
pub fn bleu<S: AsRef<str>, T: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<T>], max_n: usize) -> Result<f64, Error> {
    if candidates.len() != references.len() {
        return Err(Error::Contract(format!(
            "bleu: {} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (cand, reference) in candidates.iter().zip(references) {
        c_len += cand.len();
        r_len += reference.len();
        for n in 1..=max_n {
            let ref_counts = ngram_counts(reference, n);
            for (gram, count) in ngram_counts(cand, n) {
                matched[n - 1] += count.min(ref_counts.get(&gram).copied().unwrap_or(0));
                total[n - 1] += count;
            }
        }
    }
    if c_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..max_n {
        if matched[n] == 0 {
            return Ok(0.0);
        }
        log_sum += (matched[n] as f64 / total[n] as f64).ln();
    }
    let bp = if c_len < r_len {
        (1.0 - r_len as f64 / c_len as f64).exp()
    } else {
        1.0
    };
    Ok(bp * (log_sum / max_n as f64).exp())
}

/// Automatic evaluation summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ppl: f64,
    pub entity: f64,
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub pairs: usize,
    pub tokens: usize,
}

impl EvalReport {
    /// One `key=value` line per field.
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "ppl={}", self.ppl);
        let _ = writeln!(s, "entity={}", self.entity);
        let _ = writeln!(s, "bleu1={}", self.bleu1);
        let _ = writeln!(s, "bleu2={}", self.bleu2);
        let _ = writeln!(s, "bleu3={}", self.bleu3);
        let _ = writeln!(s, "bleu4={}", self.bleu4);
        let _ = writeln!(s, "pairs={}", self.pairs);
        let _ = writeln!(s, "tokens={}", self.tokens);
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
