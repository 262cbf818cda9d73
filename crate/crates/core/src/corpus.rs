//! Line-oriented corpus files, tokenization and the rule-based dependency
//! stand-in.
//!
//! Every file is UTF-8 with one record per line, tab-separated fields and
//! space-separated sub-fields:
//!
//! | file   | fields                                                          |
//! |--------|-----------------------------------------------------------------|
//! | QA     | question · dependency tokens · gold fact ids [· negative ids]   |
//! | dialog | post · post dependency tokens · response · fact ids (may be empty) |
//! | KB     | fact id · subject · relation · object                           |
//!
//! Blank lines are skipped. Line numbers in errors are 1-based.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::DataError;
use crate::kb::FactId;
use crate::vocab::{DependencyVocab, Vocab, ENTITY_TOKEN, EOS};

/// Directed label inserted between adjacent kept tokens by the stub parser.
pub const DEPENDENCY_LABEL: &str = "dep→";

/// Function words ignored by the stub parser and by KB retrieval.
pub const STOP_WORDS: &[&str] = &[
    "a", "an", "the", "is", "are", "was", "be", "it", "its", "of", "to", "in", "on", "at", "and",
    "or", "do", "does", "did", "you", "i", "me", "my", "that", "this", "there", "very", "quite",
    "?", ".", ",", "!", "'",
];

pub fn is_stop_word(token: &str) -> bool {
    STOP_WORDS.contains(&token)
}

/// Lowercases, splits on whitespace and splits punctuation into separate tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for ch in chunk.chars() {
            if ch.is_alphanumeric() || ch == '_' {
                word.extend(ch.to_lowercase());
            } else {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(ch.to_string());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

/// Known entity surface forms, matched longest first.
#[derive(Clone, Debug, Default)]
pub struct EntityLexicon {
    entries: Vec<Vec<String>>,
}

impl EntityLexicon {
    pub fn new<I: IntoIterator<Item = Vec<String>>>(entities: I) -> Self {
        let mut entries: Vec<Vec<String>> = entities.into_iter().filter(|e| !e.is_empty()).collect();
        entries.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
        entries.dedup();
        EntityLexicon { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Length of the longest entity starting at `tokens[at]`.
    fn match_at(&self, tokens: &[String], at: usize) -> Option<usize> {
        self.entries
            .iter()
            .find(|e| tokens[at..].starts_with(e))
            .map(Vec::len)
    }

    pub fn contains_word(&self, word: &str) -> bool {
        self.entries.iter().any(|e| e.iter().any(|w| w == word))
    }
}

/// Deterministic stand-in for a dependency parser: entity mentions become
/// [`ENTITY_TOKEN`], stop words are dropped, the remaining tokens are kept in
/// order with [`DEPENDENCY_LABEL`] between neighbours. Input consisting only of
/// stop words is kept whole.
pub fn stub_dependency_parse(tokens: &[String], entities: &EntityLexicon) -> Vec<String> {
    let mut kept = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        if let Some(len) = entities.match_at(tokens, i) {
            kept.push(ENTITY_TOKEN.to_string());
            i += len;
        } else {
            if !is_stop_word(&tokens[i]) {
                kept.push(tokens[i].clone());
            }
            i += 1;
        }
    }
    if kept.is_empty() {
        kept = tokens.to_vec();
    }
    let mut out = Vec::with_capacity(kept.len() * 2);
    for (j, t) in kept.into_iter().enumerate() {
        if j > 0 {
            out.push(DEPENDENCY_LABEL.to_string());
        }
        out.push(t);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QaRecord {
    pub question: Vec<String>,
    pub dependency: Vec<String>,
    pub gold: Vec<FactId>,
    pub negatives: Vec<FactId>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DialogRecord {
    pub post: Vec<String>,
    pub post_dependency: Vec<String>,
    pub response: Vec<String>,
    pub facts: Vec<FactId>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KbRecord {
    pub id: FactId,
    pub subject: Vec<String>,
    pub relation: String,
    pub object: Vec<String>,
}

/// A question with word and dependency ids and its gold facts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QaExample {
    pub question: Vec<usize>,
    pub dependency: Vec<usize>,
    pub gold: Vec<FactId>,
    pub negatives: Vec<FactId>,
}

/// A post-response pair; `response` ends with EOS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DialogExample {
    pub post: Vec<usize>,
    pub post_dependency: Vec<usize>,
    pub response: Vec<usize>,
    pub facts: Vec<FactId>,
}

impl QaRecord {
    pub fn encode(&self, words: &Vocab, deps: &DependencyVocab) -> QaExample {
        QaExample {
            question: words.encode(&self.question),
            dependency: deps.encode(&self.dependency),
            gold: self.gold.clone(),
            negatives: self.negatives.clone(),
        }
    }
}

impl DialogRecord {
    pub fn encode(&self, words: &Vocab, deps: &DependencyVocab) -> DialogExample {
        let mut response = words.encode(&self.response);
        response.push(EOS);
        DialogExample {
            post: words.encode(&self.post),
            post_dependency: deps.encode(&self.post_dependency),
            response,
            facts: self.facts.clone(),
        }
    }
}

fn read_lines(path: &Path) -> Result<String, DataError> {
    fs::read_to_string(path).map_err(|e| DataError::io(path, e))
}

fn split_tokens(field: &str) -> Vec<String> {
    field.split_whitespace().map(str::to_string).collect()
}

fn parse_ids(path: &Path, line: usize, field: &str, name: &str) -> Result<Vec<FactId>, DataError> {
    field
        .split_whitespace()
        .map(|s| {
            s.parse::<u32>()
                .map(FactId)
                .map_err(|_| DataError::parse(path, line, format!("field `{name}`: bad fact id `{s}`")))
        })
        .collect()
}

fn required<'a>(
    path: &Path,
    line: usize,
    fields: &[&'a str],
    at: usize,
    name: &str,
) -> Result<&'a str, DataError> {
    match fields.get(at) {
        Some(f) if !f.trim().is_empty() => Ok(f),
        _ => Err(DataError::parse(path, line, format!("missing field `{name}`"))),
    }
}

fn records(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.split('\t').collect()))
}

pub fn load_qa(path: &Path) -> Result<Vec<QaRecord>, DataError> {
    let text = read_lines(path)?;
    let mut out = Vec::new();
    for (line, fields) in records(&text) {
        let question = split_tokens(required(path, line, &fields, 0, "question")?);
        let dependency = split_tokens(required(path, line, &fields, 1, "dependency")?);
        let gold = parse_ids(path, line, required(path, line, &fields, 2, "gold facts")?, "gold facts")?;
        let negatives = match fields.get(3) {
            Some(f) => parse_ids(path, line, f, "negative facts")?,
            None => Vec::new(),
        };
        if negatives.iter().any(|n| gold.contains(n)) {
            return Err(DataError::parse(path, line, "negative facts overlap gold facts"));
        }
        if fields.len() > 4 {
            return Err(DataError::parse(path, line, format!("expected at most 4 fields, found {}", fields.len())));
        }
        out.push(QaRecord {
            question,
            dependency,
            gold,
            negatives,
        });
    }
    Ok(out)
}

pub fn load_dialog(path: &Path) -> Result<Vec<DialogRecord>, DataError> {
    let text = read_lines(path)?;
    let mut out = Vec::new();
    for (line, fields) in records(&text) {
        let post = split_tokens(required(path, line, &fields, 0, "post")?);
        let post_dependency = split_tokens(required(path, line, &fields, 1, "post dependency")?);
        let response = split_tokens(required(path, line, &fields, 2, "response")?);
        let facts = match fields.get(3) {
            Some(f) => parse_ids(path, line, f, "facts")?,
            None => Vec::new(),
        };
        if fields.len() > 4 {
            return Err(DataError::parse(path, line, format!("expected at most 4 fields, found {}", fields.len())));
        }
        out.push(DialogRecord {
            post,
            post_dependency,
            response,
            facts,
        });
    }
    Ok(out)
}

pub fn load_kb(path: &Path) -> Result<Vec<KbRecord>, DataError> {
    let text = read_lines(path)?;
    let mut out = Vec::new();
    for (line, fields) in records(&text) {
        if fields.len() != 4 {
            return Err(DataError::parse(path, line, format!("expected 4 fields, found {}", fields.len())));
        }
        let id = fields[0]
            .trim()
            .parse::<u32>()
            .map(FactId)
            .map_err(|_| DataError::parse(path, line, format!("bad fact id `{}`", fields[0])))?;
        let subject = split_tokens(required(path, line, &fields, 1, "subject")?);
        let relation = required(path, line, &fields, 2, "relation")?.trim().to_string();
        let object = split_tokens(required(path, line, &fields, 3, "object")?);
        out.push(KbRecord {
            id,
            subject,
            relation,
            object,
        });
    }
    Ok(out)
}

fn ids_field(ids: &[FactId]) -> String {
    ids.iter().map(|i| i.0.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn format_qa(records: &[QaRecord]) -> String {
    let mut s = String::new();
    for r in records {
        let _ = write!(s, "{}\t{}\t{}", r.question.join(" "), r.dependency.join(" "), ids_field(&r.gold));
        if !r.negatives.is_empty() {
            let _ = write!(s, "\t{}", ids_field(&r.negatives));
        }
        s.push('\n');
    }
    s
}

pub fn format_dialog(records: &[DialogRecord]) -> String {
    let mut s = String::new();
    for r in records {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}",
            r.post.join(" "),
            r.post_dependency.join(" "),
            r.response.join(" "),
            ids_field(&r.facts)
        );
    }
    s
}

pub fn format_kb(records: &[KbRecord]) -> String {
    let mut s = String::new();
    for r in records {
        let _ = writeln!(s, "{}\t{}\t{}\t{}", r.id.0, r.subject.join(" "), r.relation, r.object.join(" "));
    }
    s
}

pub fn write_file(path: &Path, contents: &str) -> Result<(), DataError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
        }
    }
    fs::write(path, contents).map_err(|e| DataError::io(path, e))
}
