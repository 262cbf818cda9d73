//! The knowledge base question answering matcher that is pre-trained first
//! and then partly transferred into the dialogue model.
//!
//! A question is read by two bidirectional GRUs, one over its words and one
//! over its dependency path. Their per-position states are summed after the
//! shorter stream is padded with zero states, and the sum is mean-pooled.
//! A fact is represented by the mean embedding of its subject and object
//! words plus an embedding of its relation. The matcher MLP scores the
//! concatenation `[pooled question; fact]`.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::QaExample;
use crate::error::{DataError, Error, Result};
use crate::kb::{sample_negatives, EncodedKb, FactId, FactIndex, KbTriple};
use crate::nn::{BiGru, Mlp};
use crate::optim::Adam;
use crate::params::{uniform, ParamId, ParamStore};
use crate::rng::{derive_seed, seeded};
use crate::tensor::{argmax, Graph, Tensor, Var};
use crate::vocab::PAD;

/// Name prefix of every matcher parameter; the transferred subset keeps it
/// inside the dialogue model.
pub const PREFIX: &str = "kbqa.";

const STREAM_SHUFFLE: u64 = 1;
const STREAM_NEGATIVES: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KbqaDims {
    pub word_dim: usize,
    /// Per-direction BiGRU size.
    pub hidden: usize,
    pub mlp_hidden: usize,
    pub init_scale: f64,
}

/// The parameters shared with the dialogue model: the dependency table,
/// both BiGRUs and the matcher MLP.
#[derive(Clone, Debug)]
pub struct TransferLayers {
    pub dep_emb: ParamId,
    pub bigru_w: BiGru,
    pub bigru_d: BiGru,
    pub mlp: Mlp,
    pub word_dim: usize,
}

/// Drops trailing PAD ids.
pub(crate) fn trim_pad(ids: &[usize]) -> &[usize] {
    let end = ids.iter().rposition(|&i| i != PAD).map_or(0, |p| p + 1);
    &ids[..end]
}

impl TransferLayers {
    pub fn new<R: Rng>(store: &mut ParamStore, dims: &KbqaDims, dep_vocab: usize, rng: &mut R) -> Self {
        let (d, h, s) = (dims.word_dim, dims.hidden, dims.init_scale);
        TransferLayers {
            dep_emb: store.add_embedding(format!("{PREFIX}dep_emb"), uniform(rng, &[dep_vocab, d], s)),
            bigru_w: BiGru::new(store, &format!("{PREFIX}bigru_w"), d, h, s, rng),
            bigru_d: BiGru::new(store, &format!("{PREFIX}bigru_d"), d, h, s, rng),
            mlp: Mlp::new(store, &format!("{PREFIX}mlp"), 2 * h + d, dims.mlp_hidden, s, rng),
            word_dim: d,
        }
    }

    /// Size of a question state, `2H`.
    pub fn state_size(&self) -> usize {
        self.bigru_w.output_size()
    }

    /// Size of the answer slot of the MLP input.
    pub fn answer_size(&self) -> usize {
        self.mlp.input_size() - self.state_size()
    }

    /// Runs both BiGRUs and sums their states position by position. `words`
    /// holds one embedded word per row; trailing PAD dependency ids are
    /// dropped. The result has `max(words, deps)` rows.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, words: Var, deps: &[usize]) -> Result<Var> {
        let deps = trim_pad(deps);
        if deps.is_empty() {
            return Err(Error::Contract("question has an empty dependency stream".into()));
        }
        let qw = self.bigru_w.forward(g, store, words)?;
        let table = g.param(store, self.dep_emb);
        let dep_x = g.gather(table, deps)?;
        let qd = self.bigru_d.forward(g, store, dep_x)?;
        let (n, l) = (g.value(qw).rows(), g.value(qd).rows());
        let width = self.state_size();
        let pad = |g: &mut Graph, v: Var, have: usize, want: usize| -> Result<Var> {
            if have == want {
                return Ok(v);
            }
            let zeros = g.zeros(&[want - have, width]);
            Ok(g.concat_rows(&[v, zeros])?)
        };
        let qw = pad(g, qw, n, n.max(l))?;
        let qd = pad(g, qd, l, n.max(l))?;
        Ok(g.add(qw, qd)?)
    }

    /// MLP scores `[m, 1]` of a pooled question row `[1, 2H]` against `m`
    /// answer rows `[m, answer_size]`.
    pub fn score(&self, g: &mut Graph, store: &ParamStore, pooled: Var, answers: Var) -> Result<Var> {
        let (pr, pc) = (g.value(pooled).rows(), g.value(pooled).cols());
        let ac = g.value(answers).cols();
        if pr != 1 || pc != self.state_size() || ac != self.answer_size() {
            return Err(Error::Contract(format!(
                "matcher expects [1, {}] and [m, {}], got {:?} and {:?}",
                self.state_size(),
                self.answer_size(),
                g.shape(pooled),
                g.shape(answers)
            )));
        }
        let m = g.value(answers).rows();
        let rep = g.repeat_rows(pooled, m)?;
        let x = g.concat(&[rep, answers])?;
        Ok(self.mlp.forward(g, store, x)?)
    }
}

/// Hinge loss averaged over every (gold, negative) pair:
/// `mean max(0, margin - s⁺ + s⁻)`. Scores are column vectors.
pub fn hinge_loss(g: &mut Graph, gold: Var, negatives: Var, margin: f64) -> Result<Var> {
    let (p, k) = (g.value(gold).rows(), g.value(negatives).rows());
    if p == 0 || k == 0 || g.value(gold).cols() != 1 || g.value(negatives).cols() != 1 {
        return Err(Error::Contract(format!(
            "hinge loss needs gold and negative score columns, got {:?} and {:?}",
            g.shape(gold),
            g.shape(negatives)
        )));
    }
    let margin = g.constant(Tensor::filled(&[1, 1], margin));
    let mut terms = Vec::with_capacity(p);
    for i in 0..p {
        let s = if p == 1 { gold } else { g.gather(gold, &[i])? };
        let neg_s = g.scale(s, -1.0);
        let gap = g.add_row(negatives, neg_s)?;
        let shifted = g.add_row(gap, margin)?;
        terms.push(g.relu(shifted));
    }
    let all = if terms.len() == 1 { terms[0] } else { g.concat_rows(&terms)? };
    let total = g.sum(all);
    Ok(g.scale(total, 1.0 / (p * k) as f64))
}

#[derive(Clone, Debug)]
pub struct KbqaModel {
    pub dims: KbqaDims,
    pub word_emb: ParamId,
    pub rel_emb: ParamId,
    pub layers: TransferLayers,
}

impl KbqaModel {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        dims: KbqaDims,
        words: usize,
        deps: usize,
        relations: usize,
        rng: &mut R,
    ) -> Self {
        let d = dims.word_dim;
        let word_emb = store.add_embedding(format!("{PREFIX}word_emb"), uniform(rng, &[words, d], dims.init_scale));
        let rel_emb = store.add(format!("{PREFIX}rel_emb"), uniform(rng, &[relations.max(1), d], dims.init_scale));
        let layers = TransferLayers::new(store, &dims, deps, rng);
        KbqaModel {
            dims,
            word_emb,
            rel_emb,
            layers,
        }
    }

    /// Per-position question states `[max(n, l), 2H]`.
    pub fn encode_question(&self, g: &mut Graph, store: &ParamStore, words: &[usize], deps: &[usize]) -> Result<Var> {
        let words = trim_pad(words);
        if words.is_empty() {
            return Err(Error::Contract("question has an empty word stream".into()));
        }
        let table = g.param(store, self.word_emb);
        let x = g.gather(table, words)?;
        self.layers.encode(g, store, x, deps)
    }

    /// Answer vectors `[m, d]`: surface-word mean plus relation embedding.
    pub fn encode_answers(&self, g: &mut Graph, store: &ParamStore, facts: &[&KbTriple]) -> Result<Var> {
        if facts.is_empty() {
            return Err(Error::Contract("no facts to encode".into()));
        }
        let relations = store.value(self.rel_emb).rows();
        let mut ids = Vec::new();
        let mut spans = Vec::with_capacity(facts.len());
        for f in facts {
            if f.relation >= relations {
                return Err(Error::Contract(format!("fact {} has unknown relation id {}", f.id, f.relation)));
            }
            let start = ids.len();
            ids.extend(f.surface_words());
            if ids.len() == start {
                return Err(Error::Contract(format!("fact {} has no surface words", f.id)));
            }
            spans.push((start, ids.len()));
        }
        let mut avg = Tensor::zeros(&[facts.len(), ids.len()]);
        for (r, &(a, b)) in spans.iter().enumerate() {
            let w = 1.0 / (b - a) as f64;
            let cols = ids.len();
            avg.data_mut()[r * cols + a..r * cols + b].iter_mut().for_each(|x| *x = w);
        }
        let table = g.param(store, self.word_emb);
        let rows = g.gather(table, &ids)?;
        let avg = g.constant(avg);
        let word_part = g.matmul(avg, rows)?;
        let rel_table = g.param(store, self.rel_emb);
        let rel_ids: Vec<usize> = facts.iter().map(|f| f.relation).collect();
        let rel_part = g.gather(rel_table, &rel_ids)?;
        Ok(g.add(word_part, rel_part)?)
    }

    pub fn encode_answer(&self, g: &mut Graph, store: &ParamStore, fact: &KbTriple) -> Result<Var> {
        self.encode_answers(g, store, &[fact])
    }

    /// Scores `[m, 1]` from question states and answer vectors.
    pub fn match_scores(&self, g: &mut Graph, store: &ParamStore, question: Var, answers: Var) -> Result<Var> {
        let pooled = g.mean_axis(question, 0)?;
        self.layers.score(g, store, pooled, answers)
    }

    /// Scores of `facts` for one question, in the order given.
    pub fn score_facts(&self, store: &ParamStore, words: &[usize], deps: &[usize], facts: &[&KbTriple]) -> Result<Vec<f64>> {
        let mut g = Graph::no_grad();
        let q = self.encode_question(&mut g, store, words, deps)?;
        let a = self.encode_answers(&mut g, store, facts)?;
        let s = self.match_scores(&mut g, store, q, a)?;
        Ok(g.value(s).data().to_vec())
    }

    /// Hinge loss of one question against its gold facts and `negatives`.
    pub fn question_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        example: &QaExample,
        negatives: &[FactId],
        kb: &EncodedKb,
        margin: f64,
    ) -> Result<Var> {
        let lookup = |ids: &[FactId]| -> Result<Vec<&KbTriple>> {
            ids.iter()
                .map(|&id| kb.get(id).ok_or_else(|| Error::Contract(format!("fact {id} is not in the knowledge base"))))
                .collect()
        };
        let gold = lookup(&example.gold)?;
        let neg = lookup(negatives)?;
        if gold.is_empty() || neg.is_empty() {
            return Err(Error::Contract("question needs at least one gold and one negative fact".into()));
        }
        let q = self.encode_question(g, store, &example.question, &example.dependency)?;
        let pooled = g.mean_axis(q, 0)?;
        let all: Vec<&KbTriple> = gold.iter().chain(&neg).copied().collect();
        let answers = self.encode_answers(g, store, &all)?;
        let scores = self.layers.score(g, store, pooled, answers)?;
        let gold_ids: Vec<usize> = (0..gold.len()).collect();
        let neg_ids: Vec<usize> = (gold.len()..all.len()).collect();
        let gs = g.gather(scores, &gold_ids)?;
        let ns = g.gather(scores, &neg_ids)?;
        hinge_loss(g, gs, ns, margin)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HingeConfig {
    pub margin: f64,
    pub negatives: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for HingeConfig {
    fn default() -> Self {
        HingeConfig {
            margin: 0.5,
            negatives: 20,
            learning_rate: 0.001,
            batch_size: 128,
            epochs: 20,
            seed: 0,
        }
    }
}

impl HingeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::Config(format!("margin must be positive, got {}", self.margin)));
        }
        if self.negatives == 0 || self.batch_size == 0 {
            return Err(Error::Config("negatives and batch size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Config(format!("learning rate must be non-negative, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// Trains with Adam on the pairwise hinge loss. Questions without explicit
/// negatives get a fresh sample every epoch. Returns the mean loss of each
/// epoch.
pub fn train_kbqa(
    model: &KbqaModel,
    store: &mut ParamStore,
    data: &[QaExample],
    kb: &EncodedKb,
    config: &HingeConfig,
) -> Result<Vec<f64>> {
    config.validate()?;
    if data.is_empty() {
        return Err(DataError::EmptyCorpus.into());
    }
    let all_ids = kb.ids();
    let mut adam = Adam::new(config.learning_rate);
    let mut log = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut seeded(config.seed, &[STREAM_SHUFFLE, epoch as u64]));
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut g = Graph::new();
            let mut losses = Vec::with_capacity(batch.len());
            for &i in batch {
                let ex = &data[i];
                let negatives = if ex.negatives.is_empty() {
                    let seed = derive_seed(config.seed, &[STREAM_NEGATIVES, epoch as u64, i as u64]);
                    sample_negatives(&all_ids, &ex.gold, config.negatives, seed)?
                } else {
                    ex.negatives.clone()
                };
                losses.push(model.question_loss(&mut g, store, ex, &negatives, kb, config.margin)?);
            }
            let stacked = g.concat_rows(&losses)?;
            let loss = g.mean_axis(stacked, 0)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged { step, loss: value });
            }
            total += value * batch.len() as f64;
            g.backward(loss, store)?;
            adam.step(store)?;
            step += 1;
        }
        let mean = total / data.len() as f64;
        log::info!("kbqa epoch {} loss {:.6}", epoch + 1, mean);
        log.push(mean);
    }
    Ok(log)
}

/// Default candidate facts of each question: facts sharing a content word
/// with it, at most `cap`.
pub fn default_candidates(data: &[QaExample], index: &FactIndex, cap: usize) -> Vec<Vec<FactId>> {
    data.iter().map(|ex| index.candidates_for(&ex.question, cap)).collect()
}

/// Highest-scoring candidate; ties go to the lowest fact id.
pub fn predict(candidates: &[FactId], scores: &[f64]) -> Option<FactId> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by_key(|&i| candidates[i]);
    let sorted: Vec<f64> = order.iter().map(|&i| scores[i]).collect();
    (!sorted.is_empty()).then(|| candidates[order[argmax(&sorted)]])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KbqaEval {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub questions: usize,
    pub predictions: Vec<Option<FactId>>,
}

/// Top-1 accuracy and micro-averaged F1 of one prediction per question
/// against its gold set. A question without candidates counts as a miss.
pub fn score_predictions(data: &[QaExample], predictions: &[Option<FactId>]) -> KbqaEval {
    let mut hits = 0usize;
    let predicted = predictions.iter().filter(|p| p.is_some()).count();
    let gold_total: usize = data.iter().map(|ex| ex.gold.len()).sum();
    for (ex, p) in data.iter().zip(predictions) {
        if p.is_some_and(|p| ex.gold.contains(&p)) {
            hits += 1;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let (precision, recall) = (ratio(hits, predicted), ratio(hits, gold_total));
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    KbqaEval {
        accuracy: ratio(hits, data.len()),
        precision,
        recall,
        f1,
        questions: data.len(),
        predictions: predictions.to_vec(),
    }
}

/// Scores every candidate of every question and reports accuracy and F1.
pub fn eval_kbqa(
    model: &KbqaModel,
    store: &ParamStore,
    data: &[QaExample],
    kb: &EncodedKb,
    candidates: &[Vec<FactId>],
) -> Result<KbqaEval> {
    if candidates.len() != data.len() {
        return Err(Error::Contract(format!(
            "{} questions but {} candidate lists",
            data.len(),
            candidates.len()
        )));
    }
    let mut predictions = Vec::with_capacity(data.len());
    for (ex, cands) in data.iter().zip(candidates) {
        let facts: Vec<&KbTriple> = cands
            .iter()
            .map(|&id| kb.get(id).ok_or_else(|| Error::Contract(format!("fact {id} is not in the knowledge base"))))
            .collect::<Result<_>>()?;
        if facts.is_empty() {
            predictions.push(None);
            continue;
        }
        let scores = model.score_facts(store, &ex.question, &ex.dependency, &facts)?;
        predictions.push(predict(cands, &scores));
    }
    Ok(score_predictions(data, &predictions))
}
