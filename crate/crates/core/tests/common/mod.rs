//! Fixtures and independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use transdg::dialog::{Ablation, DialogDims, DialogInstance, DialogModel, Dropout, KnowledgeWeighting};
use transdg::kb::{FactId, KbTriple};
use transdg::kbqa::KbqaDims;
use transdg::vocab::{EOS, GO, RESERVED};
use transdg::{Graph, ParamStore};

pub const DEPS: usize = 6;

pub fn toy_dims(d: usize, h: usize, layers: usize) -> DialogDims {
    DialogDims {
        word_dim: d,
        hidden: h,
        layers,
        init_scale: 0.4,
        kbqa: KbqaDims {
            word_dim: d,
            hidden: 2,
            mlp_hidden: 3,
            init_scale: 0.4,
        },
    }
}

pub fn toy_model(seed: u64, vocab: usize, dims: DialogDims, ablation: Ablation) -> (ParamStore, DialogModel) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = DialogModel::new(
        &mut store,
        dims,
        ablation,
        KnowledgeWeighting::Softmax,
        vocab,
        DEPS,
        &mut rng,
    )
    .unwrap();
    (store, model)
}

fn word<R: Rng>(rng: &mut R, vocab: usize) -> usize {
    rng.gen_range(RESERVED.len()..vocab)
}

fn words<R: Rng>(rng: &mut R, vocab: usize, max: usize) -> Vec<usize> {
    (0..rng.gen_range(1..=max)).map(|_| word(rng, vocab)).collect()
}

/// A random post with up to three retrieved responses and four facts.
pub fn random_instance<R: Rng>(rng: &mut R, vocab: usize) -> DialogInstance {
    let mut response = words(rng, vocab, 4);
    response.push(EOS);
    DialogInstance {
        post: words(rng, vocab, 5),
        deps: (0..rng.gen_range(1..=5)).map(|_| rng.gen_range(1..DEPS)).collect(),
        response,
        retrieved: (0..rng.gen_range(0..=3)).map(|_| words(rng, vocab, 3)).collect(),
        facts: (0..rng.gen_range(0..=4))
            .map(|i| KbTriple {
                id: FactId(i),
                subject: words(rng, vocab, 2),
                relation: 0,
                object: words(rng, vocab, 2),
            })
            .collect(),
    }
}

/// `p(y_t)` of every gold token under the decoder that writes the final
/// response, read one step at a time from the per-step distributions.
pub fn stepwise_probabilities(model: &DialogModel, store: &ParamStore, inst: &DialogInstance) -> Vec<f64> {
    let mut g = Graph::no_grad();
    let mut drop = Dropout::off();
    let h = model.dims.hidden;
    let enc = model.encode_post(&mut g, store, inst, &mut drop).unwrap();
    let mut prev = GO;
    let mut state = model.initial_state(&mut g, store, &enc, false).unwrap();
    let mut context = g.zeros(&[1, h]);
    let mut first = Vec::new();
    let mut drafts = Vec::new();
    for &y in &inst.response {
        let step = model.decode_step_1(&mut g, store, &enc, &state, prev, context, &mut drop).unwrap();
        let p = model.distribution(&mut g, store, &step, false).unwrap();
        first.push(g.value(p).data()[y]);
        drafts.push(*step.state.last().unwrap());
        context = step.context;
        state = step.state;
        prev = y;
    }
    if model.ablation.no_ssd {
        return first;
    }
    let memory = model.draft_memory(&mut g, store, &enc, &drafts).unwrap();
    let mut prev = GO;
    let mut state = model.initial_state(&mut g, store, &enc, true).unwrap();
    let mut context = g.zeros(&[1, h]);
    let mut draft_context = g.zeros(&[1, h]);
    let mut second = Vec::new();
    for &y in &inst.response {
        let step = model
            .decode_step_2(&mut g, store, &enc, &memory, &state, prev, context, draft_context, &mut drop)
            .unwrap();
        let p = model.distribution(&mut g, store, &step, true).unwrap();
        second.push(g.value(p).data()[y]);
        context = step.context;
        draft_context = step.draft_context.unwrap();
        state = step.state;
        prev = y;
    }
    second
}

fn grams(tokens: &[&str], n: usize) -> Vec<String> {
    if tokens.len() < n {
        return Vec::new();
    }
    (0..=tokens.len() - n).map(|i| tokens[i..i + n].join("\u{1f}")).collect()
}

fn occurrences(list: &[String], item: &str) -> usize {
    list.iter().filter(|g| g.as_str() == item).count()
}

/// Corpus BLEU by direct enumeration: clipped counts per distinct candidate
/// n-gram, product of precisions raised to `1 / max_n`, brevity penalty.
pub fn brute_bleu(candidates: &[Vec<&str>], references: &[Vec<&str>], max_n: usize) -> f64 {
    let mut product = 1.0;
    for n in 1..=max_n {
        let (mut hit, mut total) = (0usize, 0usize);
        for (c, r) in candidates.iter().zip(references) {
            let cg = grams(c, n);
            let rg = grams(r, n);
            let mut seen: Vec<&String> = Vec::new();
            for gram in &cg {
                if seen.contains(&gram) {
                    continue;
                }
                seen.push(gram);
                hit += occurrences(&cg, gram).min(occurrences(&rg, gram));
            }
            total += cg.len();
        }
        if total == 0 {
            return 0.0;
        }
        product *= hit as f64 / total as f64;
    }
    let c: usize = candidates.iter().map(Vec::len).sum();
    let r: usize = references.iter().map(Vec::len).sum();
    if c == 0 {
        return 0.0;
    }
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * product.powf(1.0 / max_n as f64)
}

/// Mean count of distinct entity words per response, by enumeration.
pub fn brute_entity(responses: &[Vec<&str>], entities: &[BTreeSet<String>]) -> f64 {
    if responses.is_empty() {
        return 0.0;
    }
    let mut total = 0usize;
    for (resp, ents) in responses.iter().zip(entities) {
        for (i, t) in resp.iter().enumerate() {
            if ents.iter().any(|e| e == t) && !resp[..i].contains(t) {
                total += 1;
            }
        }
    }
    total as f64 / responses.len() as f64
}

/// `exp` of the mean negative log-probability, one term per token.
pub fn brute_perplexity(token_probabilities: &[f64]) -> f64 {
    let mut s = 0.0;
    for p in token_probabilities {
        s -= p.ln();
    }
    (s / token_probabilities.len() as f64).exp()
}

pub fn toks(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}
