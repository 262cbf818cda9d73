//! A closed toy world for desk-scale training: a 50-entity KB with typed
//! relations, templated KBQA questions and knowledge-grounded dialogues.
//!
//! Subjects are fixed; which object each subject takes for each relation is
//! drawn from the seed. Dialogue posts mention a subject and their wording
//! signals a relation; the response mentions that relation's object. Facts
//! are split so that validation and test dialogues talk about facts that
//! never appear in training dialogues.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{
    format_dialog, format_kb, format_qa, stub_dependency_parse, tokenize, write_file, DialogRecord, EntityLexicon,
    KbRecord, QaRecord,
};
use crate::error::DataError;
use crate::kb::FactId;

const SUBJECTS: &[(&str, &str)] = &[
    ("dog", "animal"),
    ("cat", "animal"),
    ("horse", "animal"),
    ("cow", "animal"),
    ("eagle", "animal"),
    ("shark", "animal"),
    ("frog", "animal"),
    ("owl", "animal"),
    ("apple", "fruit"),
    ("banana", "fruit"),
    ("lemon", "fruit"),
    ("cherry", "fruit"),
    ("mango", "fruit"),
    ("hammer", "tool"),
    ("knife", "tool"),
    ("shovel", "tool"),
    ("bicycle", "vehicle"),
    ("truck", "vehicle"),
    ("boat", "vehicle"),
    ("train", "vehicle"),
    ("piano", "instrument"),
    ("guitar", "instrument"),
    ("drum", "instrument"),
    ("violin", "instrument"),
    ("flute", "instrument"),
];

const LOCATIONS: &[&str] = &["farm", "ocean", "forest", "kitchen", "garage", "river", "stage"];
const PROPERTIES: &[&str] = &["loud", "sweet", "sharp", "fast", "heavy", "small", "sour", "soft"];
const ABILITIES: &[&str] = &["fly", "swim", "cut", "sing", "roll"];

const RELATIONS: &[&str] = &["is_a", "at_location", "has_property", "capable_of"];

const QUESTION_TEMPLATES: &[&[&str]] = &[
    &[
        "what kind of thing is a {s} ?",
        "what type of object is the {s} ?",
        "which category does a {s} belong to ?",
    ],
    &[
        "where can you find a {s} ?",
        "where is a {s} usually found ?",
        "in which place would you see a {s} ?",
    ],
    &[
        "what property does a {s} have ?",
        "how would you describe a {s} ?",
        "what is a typical quality of a {s} ?",
    ],
    &[
        "what can a {s} do ?",
        "what is a {s} able to do ?",
        "which ability does a {s} have ?",
    ],
];

const POST_TEMPLATES: &[&[&str]] = &[
    &[
        "have you ever heard of the {s} ?",
        "tell me what you know about a {s} .",
        "my friend keeps talking about the {s} .",
    ],
    &[
        "where do people usually see a {s} ?",
        "i wonder where a {s} would be .",
        "i lost track of where the {s} went .",
    ],
    &[
        "what do you think of the {s} ?",
        "how does a {s} seem to you ?",
        "i just got a new {s} .",
    ],
    &[
        "what is special about a {s} ?",
        "why would anyone like a {s} ?",
        "what makes the {s} useful ?",
    ],
];

const RESPONSE_TEMPLATES: &[&[&str]] = &[
    &["sure , it is a kind of {o} .", "yes , that is a {o} ."],
    &["most of the time you find it near the {o} .", "try looking around the {o} ."],
    &["honestly it feels very {o} .", "i would say it is {o} ."],
    &["well , it can {o} .", "because it knows how to {o} ."],
];

const SMALL_TALK: &[(&str, &str)] = &[
    ("hello , how are you today ?", "i am doing well , thanks ."),
    ("what a nice day it is .", "it really is lovely ."),
    ("good morning to you .", "good morning !"),
];

/// How much data to generate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SyntheticSizes {
    /// Number of QA questions, at most three per fact.
    pub questions: usize,
    /// Number of dialogue pairs over all splits.
    pub dialogues: usize,
}

impl Default for SyntheticSizes {
    fn default() -> Self {
        SyntheticSizes {
            questions: 200,
            dialogues: 400,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub kb: Vec<KbRecord>,
    pub qa_train: Vec<QaRecord>,
    pub qa_valid: Vec<QaRecord>,
    pub dialog_train: Vec<DialogRecord>,
    pub dialog_valid: Vec<DialogRecord>,
    pub dialog_test: Vec<DialogRecord>,
}

/// File locations written by [`SyntheticCorpus::write`].
#[derive(Clone, Debug)]
pub struct SyntheticPaths {
    pub kb: PathBuf,
    pub qa_train: PathBuf,
    pub qa_valid: PathBuf,
    pub dialog_train: PathBuf,
    pub dialog_valid: PathBuf,
    pub dialog_test: PathBuf,
}

impl SyntheticPaths {
    pub fn in_dir(dir: &Path) -> Self {
        SyntheticPaths {
            kb: dir.join("kb.tsv"),
            qa_train: dir.join("qa_train.tsv"),
            qa_valid: dir.join("qa_valid.tsv"),
            dialog_train: dir.join("dialog_train.tsv"),
            dialog_valid: dir.join("dialog_valid.tsv"),
            dialog_test: dir.join("dialog_test.tsv"),
        }
    }
}

impl SyntheticCorpus {
    pub fn write(&self, dir: &Path) -> Result<SyntheticPaths, DataError> {
        let paths = SyntheticPaths::in_dir(dir);
        write_file(&paths.kb, &format_kb(&self.kb))?;
        write_file(&paths.qa_train, &format_qa(&self.qa_train))?;
        write_file(&paths.qa_valid, &format_qa(&self.qa_valid))?;
        write_file(&paths.dialog_train, &format_dialog(&self.dialog_train))?;
        write_file(&paths.dialog_valid, &format_dialog(&self.dialog_valid))?;
        write_file(&paths.dialog_test, &format_dialog(&self.dialog_test))?;
        Ok(paths)
    }
}

fn fill(template: &str, slot: &str, value: &str) -> Vec<String> {
    tokenize(&template.replace(slot, value))
}

pub fn make_synthetic(seed: u64, sizes: SyntheticSizes) -> SyntheticCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Facts: subject-major, one per relation.
    let mut kb = Vec::new();
    for (s, category) in SUBJECTS {
        let objects = [
            *category,
            LOCATIONS[rng.gen_range(0..LOCATIONS.len())],
            PROPERTIES[rng.gen_range(0..PROPERTIES.len())],
            ABILITIES[rng.gen_range(0..ABILITIES.len())],
        ];
        for (rel, obj) in RELATIONS.iter().zip(objects) {
            kb.push(KbRecord {
                id: FactId(kb.len() as u32),
                subject: vec![s.to_string()],
                relation: rel.to_string(),
                object: vec![obj.to_string()],
            });
        }
    }
    let lexicon = EntityLexicon::new(kb.iter().flat_map(|r| [r.subject.clone(), r.object.clone()]));

    // QA: distinct (fact, template) combinations.
    let mut combos: Vec<(usize, usize)> = (0..kb.len())
        .flat_map(|f| (0..QUESTION_TEMPLATES[0].len()).map(move |t| (f, t)))
        .collect();
    combos.shuffle(&mut rng);
    combos.truncate(sizes.questions);
    let mut qa: Vec<QaRecord> = combos
        .iter()
        .map(|&(f, t)| {
            let fact = &kb[f];
            let rel = f % RELATIONS.len();
            let question = fill(QUESTION_TEMPLATES[rel][t], "{s}", &fact.subject.join(" "));
            QaRecord {
                dependency: stub_dependency_parse(&question, &lexicon),
                question,
                gold: vec![fact.id],
                negatives: vec![],
            }
        })
        .collect();
    let qa_valid = qa.split_off(qa.len() - qa.len() / 5);

    // Dialogue facts split 75 / 10 / 15.
    let mut fact_order: Vec<usize> = (0..kb.len()).collect();
    fact_order.shuffle(&mut rng);
    let n_test = kb.len() * 15 / 100;
    let n_valid = kb.len() / 10;
    let test_facts: BTreeSet<usize> = fact_order[..n_test].iter().copied().collect();
    let valid_facts: BTreeSet<usize> = fact_order[n_test..n_test + n_valid].iter().copied().collect();

    let n_small_talk = (sizes.dialogues / 20).max(1).min(sizes.dialogues);
    let n_grounded = sizes.dialogues - n_small_talk;
    let (mut train, mut valid, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..n_grounded {
        let f = fact_order[i % kb.len()];
        let fact = &kb[f];
        let rel = f % RELATIONS.len();
        let post_t = POST_TEMPLATES[rel].choose(&mut rng).expect("non-empty");
        let resp_t = RESPONSE_TEMPLATES[rel].choose(&mut rng).expect("non-empty");
        let post = fill(post_t, "{s}", &fact.subject.join(" "));
        let record = DialogRecord {
            post_dependency: stub_dependency_parse(&post, &lexicon),
            post,
            response: fill(resp_t, "{o}", &fact.object.join(" ")),
            facts: vec![fact.id],
        };
        if test_facts.contains(&f) {
            test.push(record);
        } else if valid_facts.contains(&f) {
            valid.push(record);
        } else {
            train.push(record);
        }
    }
    for i in 0..n_small_talk {
        let (p, r) = SMALL_TALK[i % SMALL_TALK.len()];
        let post = tokenize(p);
        train.push(DialogRecord {
            post_dependency: stub_dependency_parse(&post, &lexicon),
            post,
            response: tokenize(r),
            facts: vec![],
        });
    }
    train.shuffle(&mut rng);

    SyntheticCorpus {
        kb,
        qa_train: qa,
        qa_valid,
        dialog_train: train,
        dialog_valid: valid,
        dialog_test: test,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn world_has_fifty_entities() {
        let c = make_synthetic(1, SyntheticSizes::default());
        let entities: BTreeSet<&String> = c.kb.iter().flat_map(|r| r.subject.iter().chain(&r.object)).collect();
        assert!((45..=55).contains(&entities.len()), "{}", entities.len());
    }

    #[test]
    fn same_seed_same_files() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let a = make_synthetic(7, SyntheticSizes::default()).write(dir_a.path()).unwrap();
        let b = make_synthetic(7, SyntheticSizes::default()).write(dir_b.path()).unwrap();
        for (x, y) in [(a.kb, b.kb), (a.qa_train, b.qa_train), (a.dialog_train, b.dialog_train)] {
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
        }
    }

    #[test]
    fn qa_gold_facts_exist_and_are_single() {
        let c = make_synthetic(3, SyntheticSizes::default());
        let ids: BTreeSet<FactId> = c.kb.iter().map(|r| r.id).collect();
        assert_eq!(c.qa_train.len() + c.qa_valid.len(), 200);
        for q in c.qa_train.iter().chain(&c.qa_valid) {
            assert_eq!(q.gold.len(), 1);
            assert!(ids.contains(&q.gold[0]));
        }
    }

    #[test]
    fn dialogues_are_mostly_grounded() {
        let c = make_synthetic(5, SyntheticSizes::default());
        let all: Vec<&DialogRecord> = c.dialog_train.iter().chain(&c.dialog_valid).chain(&c.dialog_test).collect();
        let grounded = all.iter().filter(|d| !d.facts.is_empty()).count();
        assert_eq!(all.len(), 400);
        assert!(grounded as f64 / all.len() as f64 >= 0.9);
        for d in all.iter().filter(|d| !d.facts.is_empty()) {
            let fact = c.kb.iter().find(|r| r.id == d.facts[0]).unwrap();
            assert!(d.post.contains(&fact.subject[0]));
            assert!(d.response.contains(&fact.object[0]));
        }
    }

    #[test]
    fn held_out_dialogue_facts_are_unseen_in_training() {
        let c = make_synthetic(11, SyntheticSizes::default());
        let train: BTreeSet<FactId> = c.dialog_train.iter().flat_map(|d| d.facts.clone()).collect();
        for d in c.dialog_test.iter().chain(&c.dialog_valid) {
            assert!(d.facts.iter().all(|f| !train.contains(f)));
        }
        assert!(!c.dialog_test.is_empty());
    }
}
