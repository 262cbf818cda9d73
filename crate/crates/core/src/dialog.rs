//! Knowledge-aware dialogue generation.
//!
//! The encoder reads a post with a stacked GRU and, in parallel, with the
//! question encoders transferred from the matcher. The two streams are fused
//! per position, and retrieved responses steer an extra attention read over
//! the fused states. Generation runs in two passes. The first decoder writes
//! a draft. The second rewrites it while attending to the post and to the
//! draft states. Each decoder gets a knowledge vector: the candidate facts
//! of the post, weighted by the transferred matcher MLP.
//!
//! Parameters created here are named `dialog.*`; the transferred layers keep
//! their `kbqa.*` names so that a matcher checkpoint loads by name.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kb::KbTriple;
use crate::kbqa::{trim_pad, KbqaDims, TransferLayers, PREFIX as KBQA_PREFIX};
use crate::nn::{Attention, AttentionKeys, Linear, StackedGru};
use crate::optim::Adam;
use crate::params::{uniform, ParamId, ParamStore};
use crate::rng::seeded;
use crate::tensor::{argmax, Graph, Tensor, Var};
use crate::vocab::{Vocab, EOS, GO, PAD};

pub const PREFIX: &str = "dialog.";

const STREAM_SHUFFLE: u64 = 11;
const STREAM_DROPOUT: u64 = 12;

/// Ablation switches, one per removable module.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// Question encoders start from random weights instead of the matcher's.
    pub no_qrt: bool,
    /// Both knowledge vectors are zero.
    pub no_kst: bool,
    /// The response-guided attention vector is zero.
    pub no_rga: bool,
    /// The draft is the final response and only the first decoder trains.
    pub no_ssd: bool,
}

/// How matcher scores over candidate facts become weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnowledgeWeighting {
    #[default]
    Softmax,
    /// `r_j / Σ r`, undefined when the scores sum to zero.
    Ratio,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DialogDims {
    pub word_dim: usize,
    /// Encoder and decoder GRU size.
    pub hidden: usize,
    pub layers: usize,
    pub init_scale: f64,
    pub kbqa: KbqaDims,
}

/// One post with everything the model reads for it.
#[derive(Clone, Debug, PartialEq)]
pub struct DialogInstance {
    pub post: Vec<usize>,
    pub deps: Vec<usize>,
    /// Gold response ending with EOS; may be empty at generation time.
    pub response: Vec<usize>,
    /// Responses of retrieved similar posts.
    pub retrieved: Vec<Vec<usize>>,
    /// Candidate facts for the knowledge vectors.
    pub facts: Vec<KbTriple>,
}

/// Train-time dropout with its own random stream; `off()` is the identity.
pub struct Dropout {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn off() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn train(rate: f64, rng: ChaCha8Rng) -> Self {
        Dropout { rate, rng: Some(rng) }
    }

    fn apply(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        match &mut self.rng {
            Some(rng) => Ok(g.dropout(x, self.rate, true, rng)?),
            None => Ok(x),
        }
    }
}

/// Candidate fact embeddings `e(b_j) = [subject mean; object mean]` and
/// their adapted form in the matcher's answer space.
#[derive(Clone, Copy, Debug)]
pub struct Knowledge {
    pub embeddings: Var,
    pub adapted: Var,
}

#[derive(Clone, Debug)]
pub struct EncodedPost {
    /// Fused states `h_i`, one row per aligned position.
    pub states: Var,
    pub pooled: Var,
    pub h_attn: Var,
    pub h_final: Var,
    /// Response-guided weights, one row per retrieved response.
    pub rga_weights: Option<Var>,
    pub knowledge: Option<Knowledge>,
    pub c_b: Var,
    pub c_b_weights: Option<Var>,
    keys1: AttentionKeys,
    keys2: Option<AttentionKeys>,
}

/// Output of one decoder step before the vocabulary projection.
#[derive(Clone, Debug)]
pub struct Step {
    pub state: Vec<Var>,
    pub context: Var,
    /// Draft-state context, second decoder only.
    pub draft_context: Option<Var>,
    pub features: Var,
    pub weights: Var,
    pub draft_weights: Option<Var>,
}

/// What the second decoder reads from the first.
#[derive(Clone, Debug)]
pub struct DraftMemory {
    keys: AttentionKeys,
    pub c_b: Var,
    pub c_b_weights: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct Losses {
    pub l1: Var,
    pub l2: Option<Var>,
    pub total: Var,
}

/// Every attention weight row produced while reading one instance.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionTrace {
    pub rga: Vec<Vec<f64>>,
    pub post1: Vec<Vec<f64>>,
    pub post2: Vec<Vec<f64>>,
    pub draft: Vec<Vec<f64>>,
    pub knowledge: Vec<Vec<f64>>,
}

impl AttentionTrace {
    fn push(&mut self, family: fn(&mut Self) -> &mut Vec<Vec<f64>>, g: &Graph, w: Var) {
        let t = g.value(w);
        for r in 0..t.rows() {
            family(self).push(t.row_slice(r).to_vec());
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Generation {
    pub draft: Vec<usize>,
    pub response: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct DialogModel {
    pub dims: DialogDims,
    pub ablation: Ablation,
    pub weighting: KnowledgeWeighting,
    pub word_emb: ParamId,
    pub encoder: StackedGru,
    pub transfer: TransferLayers,
    pub fuse: Linear,
    pub rga: Attention,
    pub adapter_post: Linear,
    pub adapter_know: Linear,
    pub know_proj: Linear,
    pub init1: Vec<Linear>,
    pub dec1: StackedGru,
    pub attn1: Attention,
    pub out1: Linear,
    pub init2: Vec<Linear>,
    pub dec2: StackedGru,
    pub attn2_post: Attention,
    pub attn2_draft: Attention,
    pub out2: Linear,
}

fn ensure(cond: bool, message: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Contract(message()))
    }
}

impl DialogModel {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        dims: DialogDims,
        ablation: Ablation,
        weighting: KnowledgeWeighting,
        words: usize,
        deps: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.word_dim != dims.kbqa.word_dim {
            return Err(Error::Config(format!(
                "dialogue word dimension {} differs from the matcher word dimension {}",
                dims.word_dim, dims.kbqa.word_dim
            )));
        }
        if dims.layers == 0 || dims.hidden == 0 || dims.word_dim == 0 {
            return Err(Error::Config("dimensions and layer count must be positive".into()));
        }
        let (d, h, s) = (dims.word_dim, dims.hidden, dims.init_scale);
        let n = |part: &str| format!("{PREFIX}{part}");
        let word_emb = store.add_embedding(n("word_emb"), uniform(rng, &[words, d], s));
        let encoder = StackedGru::new(store, &n("encoder"), d, h, dims.layers, s, rng);
        let transfer = TransferLayers::new(store, &dims.kbqa, deps, rng);
        let q = transfer.state_size();
        let answer = transfer.answer_size();
        let fuse = Linear::new(store, &n("fuse"), q, h, true, s, rng);
        let rga = Attention::new(store, &n("rga"), d, h, h, s, rng);
        let adapter_post = Linear::new(store, &n("adapter_post"), h, q, true, s, rng);
        let adapter_know = Linear::new(store, &n("adapter_know"), 2 * d, answer, true, s, rng);
        if answer == d {
            // Start from the mean of subject and object vectors, the matcher's
            // own word-level answer representation.
            let mut w = Tensor::zeros(&[2 * d, d]);
            for i in 0..d {
                w.data_mut()[i * d + i] = 0.5;
                w.data_mut()[(d + i) * d + i] = 0.5;
            }
            store.get_mut(adapter_know.weight).value = w;
        }
        let know_proj = Linear::new(store, &n("know_proj"), 2 * d, h, false, s, rng);
        let final_size = h + q + h;
        let inits = |store: &mut ParamStore, rng: &mut R, name: &str| -> Vec<Linear> {
            (0..dims.layers)
                .map(|l| Linear::new(store, &n(&format!("{name}.l{l}")), final_size, h, true, s, rng))
                .collect()
        };
        let init1 = inits(store, rng, "init1");
        let dec1 = StackedGru::new(store, &n("dec1"), h + h + d, h, dims.layers, s, rng);
        let attn1 = Attention::new(store, &n("attn1"), h, h, h, s, rng);
        let out1 = Linear::new(store, &n("out1"), 3 * h, words, false, s, rng);
        let init2 = inits(store, rng, "init2");
        let dec2 = StackedGru::new(store, &n("dec2"), 3 * h + d, h, dims.layers, s, rng);
        let attn2_post = Attention::new(store, &n("attn2_post"), h, h, h, s, rng);
        let attn2_draft = Attention::new(store, &n("attn2_draft"), h, h, h, s, rng);
        let out2 = Linear::new(store, &n("out2"), 4 * h, words, false, s, rng);
        Ok(DialogModel {
            dims,
            ablation,
            weighting,
            word_emb,
            encoder,
            transfer,
            fuse,
            rga,
            adapter_post,
            adapter_know,
            know_proj,
            init1,
            dec1,
            attn1,
            out1,
            init2,
            dec2,
            attn2_post,
            attn2_draft,
            out2,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.out1.output
    }

    fn hidden(&self) -> usize {
        self.dims.hidden
    }

    /// Copies the transferred layers from a trained matcher store and seeds
    /// the word table with the matcher's vectors for shared tokens. Returns
    /// the number of word rows copied.
    pub fn load_transfer(
        &self,
        store: &mut ParamStore,
        kbqa: &ParamStore,
        kbqa_words: &Vocab,
        words: &Vocab,
    ) -> Result<usize> {
        let names: Vec<String> = store
            .iter()
            .map(|(_, p)| p.name.clone())
            .filter(|name| name.starts_with(KBQA_PREFIX))
            .filter(|name| !self.ablation.no_qrt || name.starts_with(&format!("{KBQA_PREFIX}mlp")))
            .collect();
        for name in names {
            let source = kbqa
                .by_name(&name)
                .map_err(|_| Error::Config(format!("matcher checkpoint has no parameter `{name}`")))?;
            let want = store.by_name(&name)?.value.shape().to_vec();
            if source.value.shape() != want.as_slice() {
                return Err(Error::Config(format!(
                    "transferred parameter `{name}` has shape {:?} but the dialogue configuration expects {:?}",
                    source.value.shape(),
                    want
                )));
            }
            store.assign(&name, source.value.clone())?;
        }
        let source = &kbqa.by_name(&format!("{KBQA_PREFIX}word_emb"))?.value;
        let d = self.dims.word_dim;
        if source.cols() != d {
            return Err(Error::Config(format!(
                "matcher word dimension {} differs from the dialogue word dimension {d}",
                source.cols()
            )));
        }
        let table = &mut store.get_mut(self.word_emb).value;
        let mut copied = 0;
        for (id, token) in words.tokens().iter().enumerate().skip(1) {
            if let Some(src) = kbqa_words.get(token) {
                if src < source.rows() && id < table.rows() {
                    table.data_mut()[id * d..(id + 1) * d].copy_from_slice(source.row_slice(src));
                    copied += 1;
                }
            }
        }
        Ok(copied)
    }

    /// Freezes or unfreezes every transferred layer.
    pub fn freeze_transfer(&self, store: &mut ParamStore, frozen: bool) {
        store.set_frozen(KBQA_PREFIX, frozen);
    }

    /// Reads the post. Empty retrieval or fact lists give zero vectors.
    pub fn encode_post(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        inst: &DialogInstance,
        drop: &mut Dropout,
    ) -> Result<EncodedPost> {
        let post = trim_pad(&inst.post);
        ensure(!post.is_empty(), || "empty post".into())?;
        let table = g.param(store, self.word_emb);
        let x = g.gather(table, post)?;
        let x = drop.apply(g, x)?;
        let hw = self.encoder.encode(g, store, x)?;
        let ht = self.transfer.encode(g, store, x, &inst.deps)?;
        let (n, p) = (post.len(), g.value(ht).rows());
        let hw_full = if p > n {
            let zeros = g.zeros(&[p - n, self.hidden()]);
            g.concat_rows(&[hw, zeros])?
        } else {
            hw
        };
        let projected = self.fuse.forward(g, store, ht)?;
        let states = g.add(hw_full, projected)?;
        let pooled = g.mean_axis(states, 0)?;
        let (h_attn, rga_weights) = self.response_guided(g, store, table, states, &inst.retrieved)?;
        let hw_last = g.gather(hw, &[n - 1])?;
        let ht_last = g.gather(ht, &[p - 1])?;
        let h_final = g.concat(&[hw_last, ht_last, h_attn])?;
        let knowledge = if self.ablation.no_kst || inst.facts.is_empty() {
            None
        } else {
            Some(self.knowledge_set(g, store, table, &inst.facts)?)
        };
        let (c_b, c_b_weights) = self.knowledge_attention(g, store, pooled, knowledge)?;
        let keys1 = self.attn1.prepare(g, store, states)?;
        let keys2 = if self.ablation.no_ssd {
            None
        } else {
            Some(self.attn2_post.prepare(g, store, states)?)
        };
        Ok(EncodedPost {
            states,
            pooled,
            h_attn,
            h_final,
            rga_weights,
            knowledge,
            c_b,
            c_b_weights,
            keys1,
            keys2,
        })
    }

    /// Mean over retrieved responses of the post read guided by each one.
    fn response_guided(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        table: Var,
        states: Var,
        retrieved: &[Vec<usize>],
    ) -> Result<(Var, Option<Var>)> {
        let mut queries = Vec::new();
        if !self.ablation.no_rga {
            for cand in retrieved {
                let ids: Vec<usize> = cand.iter().copied().filter(|&i| i != PAD).collect();
                if ids.is_empty() {
                    continue;
                }
                let rows = g.gather(table, &ids)?;
                queries.push(g.mean_axis(rows, 0)?);
            }
        }
        if queries.is_empty() {
            return Ok((g.zeros(&[1, self.hidden()]), None));
        }
        let q = g.concat_rows(&queries)?;
        let keys = self.rga.prepare(g, store, states)?;
        let (ctx, weights) = self.rga.attend(g, store, q, &keys, None)?;
        Ok((g.mean_axis(ctx, 0)?, Some(weights)))
    }

    fn knowledge_set(&self, g: &mut Graph, store: &ParamStore, table: Var, facts: &[KbTriple]) -> Result<Knowledge> {
        let side = |g: &mut Graph, pick: fn(&KbTriple) -> &[usize]| -> Result<Var> {
            let mut ids = Vec::new();
            let mut spans = Vec::with_capacity(facts.len());
            for f in facts {
                let start = ids.len();
                ids.extend_from_slice(pick(f));
                ensure(ids.len() > start, || format!("fact {} has an empty entity", f.id))?;
                spans.push((start, ids.len()));
            }
            let cols = ids.len();
            let mut avg = Tensor::zeros(&[facts.len(), cols]);
            for (r, &(a, b)) in spans.iter().enumerate() {
                let w = 1.0 / (b - a) as f64;
                avg.data_mut()[r * cols + a..r * cols + b].iter_mut().for_each(|x| *x = w);
            }
            let rows = g.gather(table, &ids)?;
            let avg = g.constant(avg);
            Ok(g.matmul(avg, rows)?)
        };
        let subjects = side(g, |f| &f.subject)?;
        let objects = side(g, |f| &f.object)?;
        let embeddings = g.concat(&[subjects, objects])?;
        let adapted = self.adapter_know.forward(g, store, embeddings)?;
        Ok(Knowledge { embeddings, adapted })
    }

    /// Knowledge vector for a pooled row `v`: matcher scores of `v` against
    /// every candidate, turned into weights over the candidate embeddings,
    /// then projected to the decoder slot. No candidates give zeros.
    pub fn knowledge_attention(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        v: Var,
        knowledge: Option<Knowledge>,
    ) -> Result<(Var, Option<Var>)> {
        let Some(k) = knowledge else {
            return Ok((g.zeros(&[1, self.hidden()]), None));
        };
        let query = self.adapter_post.forward(g, store, v)?;
        let scores = self.transfer.score(g, store, query, k.adapted)?;
        let m = g.value(scores).rows();
        let scores = g.reshape(scores, &[1, m])?;
        let weights = match self.weighting {
            KnowledgeWeighting::Softmax => g.softmax(scores),
            KnowledgeWeighting::Ratio => g.normalize_sum(scores),
        };
        let mix = g.matmul(weights, k.embeddings)?;
        Ok((self.know_proj.forward(g, store, mix)?, Some(weights)))
    }

    /// Per-layer initial state `tanh(W h_final + b)` of the first or second
    /// decoder.
    pub fn initial_state(&self, g: &mut Graph, store: &ParamStore, enc: &EncodedPost, second: bool) -> Result<Vec<Var>> {
        let inits = if second { &self.init2 } else { &self.init1 };
        inits
            .iter()
            .map(|l| {
                let y = l.forward(g, store, enc.h_final)?;
                Ok(g.tanh(y))
            })
            .collect()
    }

    fn embed(&self, g: &mut Graph, store: &ParamStore, token: usize) -> Result<Var> {
        let table = g.param(store, self.word_emb);
        Ok(g.gather(table, &[token])?)
    }

    /// First decoder step. The post context is read with the previous state
    /// and fed to the next step; the GRU input is `[c_{t-1}; c^b; e(y_{t-1})]`.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_step_1(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        enc: &EncodedPost,
        state: &[Var],
        prev_token: usize,
        prev_context: Var,
        drop: &mut Dropout,
    ) -> Result<Step> {
        let top = *state.last().expect("at least one layer");
        let (context, weights) = self.attn1.attend(g, store, top, &enc.keys1, None)?;
        let e = self.embed(g, store, prev_token)?;
        let x = g.concat(&[prev_context, enc.c_b, e])?;
        let x = drop.apply(g, x)?;
        let next = self.dec1.step(g, store, x, state)?;
        let s = *next.last().expect("at least one layer");
        let features = g.concat(&[s, context, enc.c_b])?;
        let features = drop.apply(g, features)?;
        Ok(Step {
            state: next,
            context,
            draft_context: None,
            features,
            weights,
            draft_weights: None,
        })
    }

    /// Attention keys over the first decoder's states and the draft-side
    /// knowledge vector, read from the mean draft state.
    pub fn draft_memory(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        enc: &EncodedPost,
        draft_states: &[Var],
    ) -> Result<DraftMemory> {
        ensure(!draft_states.is_empty(), || "empty first-decoder trace".into())?;
        let s = g.concat_rows(draft_states)?;
        let keys = self.attn2_draft.prepare(g, store, s)?;
        let mean = g.mean_axis(s, 0)?;
        let (c_b, c_b_weights) = self.knowledge_attention(g, store, mean, enc.knowledge)?;
        Ok(DraftMemory { keys, c_b, c_b_weights })
    }

    /// Second decoder step with GRU input `[c'_{t-1}; c^d_{t-1}; c^b'; e(y_{t-1})]`.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_step_2(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        enc: &EncodedPost,
        memory: &DraftMemory,
        state: &[Var],
        prev_token: usize,
        prev_context: Var,
        prev_draft_context: Var,
        drop: &mut Dropout,
    ) -> Result<Step> {
        let keys2 = enc
            .keys2
            .as_ref()
            .ok_or_else(|| Error::Contract("second decoder is disabled".into()))?;
        let top = *state.last().expect("at least one layer");
        let (context, weights) = self.attn2_post.attend(g, store, top, keys2, None)?;
        let (draft_context, draft_weights) = self.attn2_draft.attend(g, store, top, &memory.keys, None)?;
        let e = self.embed(g, store, prev_token)?;
        let x = g.concat(&[prev_context, prev_draft_context, memory.c_b, e])?;
        let x = drop.apply(g, x)?;
        let next = self.dec2.step(g, store, x, state)?;
        let s = *next.last().expect("at least one layer");
        let features = g.concat(&[s, context, draft_context, memory.c_b])?;
        let features = drop.apply(g, features)?;
        Ok(Step {
            state: next,
            context,
            draft_context: Some(draft_context),
            features,
            weights,
            draft_weights: Some(draft_weights),
        })
    }

    /// Next-token distribution `[1, |V|]` of a step from either decoder.
    pub fn distribution(&self, g: &mut Graph, store: &ParamStore, step: &Step, second: bool) -> Result<Var> {
        let out = if second { &self.out2 } else { &self.out1 };
        let logits = out.forward(g, store, step.features)?;
        Ok(g.softmax(logits))
    }

    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        inst: &DialogInstance,
        drop: &mut Dropout,
        mut trace: Option<&mut AttentionTrace>,
    ) -> Result<Losses> {
        let target = &inst.response;
        ensure(!target.is_empty(), || "empty gold response".into())?;
        let h = self.hidden();
        let enc = self.encode_post(g, store, inst, drop)?;
        if let Some(tr) = trace.as_deref_mut() {
            if let Some(w) = enc.rga_weights {
                tr.push(|t| &mut t.rga, g, w);
            }
            if let Some(w) = enc.c_b_weights {
                tr.push(|t| &mut t.knowledge, g, w);
            }
        }
        let inputs: Vec<usize> = std::iter::once(GO).chain(target[..target.len() - 1].iter().copied()).collect();

        let mut state = self.initial_state(g, store, &enc, false)?;
        let mut context = g.zeros(&[1, h]);
        let mut features = Vec::with_capacity(target.len());
        let mut draft_states = Vec::with_capacity(target.len());
        for &prev in &inputs {
            let step = self.decode_step_1(g, store, &enc, &state, prev, context, drop)?;
            if let Some(tr) = trace.as_deref_mut() {
                tr.push(|t| &mut t.post1, g, step.weights);
            }
            features.push(step.features);
            draft_states.push(*step.state.last().expect("at least one layer"));
            context = step.context;
            state = step.state;
        }
        let stacked = g.concat_rows(&features)?;
        let logits = self.out1.forward(g, store, stacked)?;
        let l1 = g.cross_entropy(logits, target)?;
        if self.ablation.no_ssd {
            return Ok(Losses { l1, l2: None, total: l1 });
        }

        let memory = self.draft_memory(g, store, &enc, &draft_states)?;
        if let (Some(tr), Some(w)) = (trace.as_deref_mut(), memory.c_b_weights) {
            tr.push(|t| &mut t.knowledge, g, w);
        }
        let mut state = self.initial_state(g, store, &enc, true)?;
        let mut context = g.zeros(&[1, h]);
        let mut draft_context = g.zeros(&[1, h]);
        let mut features = Vec::with_capacity(target.len());
        for &prev in &inputs {
            let step = self.decode_step_2(g, store, &enc, &memory, &state, prev, context, draft_context, drop)?;
            if let Some(tr) = trace.as_deref_mut() {
                tr.push(|t| &mut t.post2, g, step.weights);
                tr.push(|t| &mut t.draft, g, step.draft_weights.expect("second decoder"));
            }
            features.push(step.features);
            context = step.context;
            draft_context = step.draft_context.expect("second decoder");
            state = step.state;
        }
        let stacked = g.concat_rows(&features)?;
        let logits = self.out2.forward(g, store, stacked)?;
        let l2 = g.cross_entropy(logits, target)?;
        let total = g.add(l1, l2)?;
        Ok(Losses {
            l1,
            l2: Some(l2),
            total,
        })
    }

    /// Teacher-forced summed NLL of the gold response under each decoder and
    /// their sum. Without the second decoder the total is the first loss.
    pub fn training_losses(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        inst: &DialogInstance,
        drop: &mut Dropout,
    ) -> Result<Losses> {
        self.forward(g, store, inst, drop, None)
    }

    /// Every attention weight row of a teacher-forced pass without dropout.
    pub fn attention_trace(&self, store: &ParamStore, inst: &DialogInstance) -> Result<AttentionTrace> {
        let mut g = Graph::no_grad();
        let mut trace = AttentionTrace::default();
        self.forward(&mut g, store, inst, &mut Dropout::off(), Some(&mut trace))?;
        Ok(trace)
    }

    /// `(L1, L2, L)` values without dropout.
    pub fn loss_values(&self, store: &ParamStore, inst: &DialogInstance) -> Result<(f64, f64, f64)> {
        let mut g = Graph::no_grad();
        let l = self.forward(&mut g, store, inst, &mut Dropout::off(), None)?;
        let l2 = l.l2.map_or(0.0, |v| g.value(v).item());
        Ok((g.value(l.l1).item(), l2, g.value(l.total).item()))
    }

    /// Summed NLL of the gold response under the decoder that produces the
    /// final response, and the number of scored tokens (EOS included).
    pub fn response_nll(&self, store: &ParamStore, inst: &DialogInstance) -> Result<(f64, usize)> {
        let (l1, l2, _) = self.loss_values(store, inst)?;
        let nll = if self.ablation.no_ssd { l1 } else { l2 };
        Ok((nll, inst.response.len()))
    }

    /// Greedy decoding: the first decoder drafts until EOS or `max_len`
    /// tokens, then the second decoder writes the final response reading the
    /// draft states. Returned token lists exclude EOS.
    pub fn generate(&self, store: &ParamStore, inst: &DialogInstance, max_len: usize) -> Result<Generation> {
        ensure(max_len > 0, || "max_len must be positive".into())?;
        let h = self.hidden();
        let mut g = Graph::no_grad();
        let mut drop = Dropout::off();
        let enc = self.encode_post(&mut g, store, inst, &mut drop)?;

        let mut state = self.initial_state(&mut g, store, &enc, false)?;
        let mut context = g.zeros(&[1, h]);
        let (mut prev, mut draft, mut draft_states) = (GO, Vec::new(), Vec::new());
        for _ in 0..max_len {
            let step = self.decode_step_1(&mut g, store, &enc, &state, prev, context, &mut drop)?;
            let logits = self.out1.forward(&mut g, store, step.features)?;
            prev = argmax(g.value(logits).data());
            draft_states.push(*step.state.last().expect("at least one layer"));
            context = step.context;
            state = step.state;
            if prev == EOS {
                break;
            }
            draft.push(prev);
        }
        if self.ablation.no_ssd {
            return Ok(Generation {
                response: draft.clone(),
                draft,
            });
        }

        let memory = self.draft_memory(&mut g, store, &enc, &draft_states)?;
        let mut state = self.initial_state(&mut g, store, &enc, true)?;
        let mut context = g.zeros(&[1, h]);
        let mut draft_context = g.zeros(&[1, h]);
        let (mut prev, mut response) = (GO, Vec::new());
        for _ in 0..max_len {
            let step =
                self.decode_step_2(&mut g, store, &enc, &memory, &state, prev, context, draft_context, &mut drop)?;
            let logits = self.out2.forward(&mut g, store, step.features)?;
            prev = argmax(g.value(logits).data());
            context = step.context;
            draft_context = step.draft_context.expect("second decoder");
            state = step.state;
            if prev == EOS {
                break;
            }
            response.push(prev);
        }
        Ok(Generation { draft, response })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DialogTrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for DialogTrainConfig {
    fn default() -> Self {
        DialogTrainConfig {
            learning_rate: 0.0005,
            batch_size: 100,
            epochs: 20,
            dropout: 0.2,
            seed: 0,
        }
    }
}

/// Mean per-example losses of one epoch, with validation `L` when a
/// validation set is given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l1: f64,
    pub l2: f64,
    pub total: f64,
    pub valid: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    /// Epoch (1-based) with the lowest validation loss and its parameters.
    pub best: Option<(usize, ParamStore)>,
}

/// Mean `(L1, L2, L)` over `data` without dropout.
pub fn mean_losses(model: &DialogModel, store: &ParamStore, data: &[DialogInstance]) -> Result<(f64, f64, f64)> {
    let mut sums = (0.0, 0.0, 0.0);
    for inst in data {
        let (a, b, c) = model.loss_values(store, inst)?;
        sums = (sums.0 + a, sums.1 + b, sums.2 + c);
    }
    let n = data.len().max(1) as f64;
    Ok((sums.0 / n, sums.1 / n, sums.2 / n))
}

/// Trains encoder, both decoders and every non-frozen transferred layer
/// end to end with Adam on the batch mean of `L`.
pub fn train_dialog(
    model: &DialogModel,
    store: &mut ParamStore,
    train: &[DialogInstance],
    valid: &[DialogInstance],
    config: &DialogTrainConfig,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(crate::error::DataError::EmptyCorpus.into());
    }
    if config.batch_size == 0 || !(config.learning_rate >= 0.0) || !(0.0..1.0).contains(&config.dropout) {
        return Err(Error::Config(format!("invalid training settings {config:?}")));
    }
    let mut adam = Adam::new(config.learning_rate);
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut seeded(config.seed, &[STREAM_SHUFFLE, epoch as u64]));
        let mut sums = (0.0, 0.0, 0.0);
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let mut drop = Dropout::train(
                config.dropout,
                seeded(config.seed, &[STREAM_DROPOUT, epoch as u64, b as u64]),
            );
            let mut g = Graph::new();
            let mut totals = Vec::with_capacity(batch.len());
            for &i in batch {
                let l = model.training_losses(&mut g, store, &train[i], &mut drop)?;
                sums.0 += g.value(l.l1).item();
                sums.1 += l.l2.map_or(0.0, |v| g.value(v).item());
                totals.push(l.total);
            }
            let stacked = g.concat_rows(&totals)?;
            let loss = g.mean_axis(stacked, 0)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged { step, loss: value });
            }
            sums.2 += value * batch.len() as f64;
            g.backward(loss, store)?;
            adam.step(store)?;
            step += 1;
        }
        let n = train.len() as f64;
        let valid_loss = if valid.is_empty() {
            None
        } else {
            Some(mean_losses(model, store, valid)?.2)
        };
        let entry = EpochLog {
            epoch: epoch + 1,
            l1: sums.0 / n,
            l2: sums.1 / n,
            total: sums.2 / n,
            valid: valid_loss,
        };
        log::info!(
            "dialog epoch {} L1 {:.6} L2 {:.6} L {:.6} valid {}",
            entry.epoch,
            entry.l1,
            entry.l2,
            entry.total,
            valid_loss.map_or("-".to_string(), |v| format!("{v:.6}"))
        );
        if let Some(v) = valid_loss {
            if best.as_ref().is_none_or(|(_, b, _)| v < *b) {
                best = Some((epoch + 1, v, store.clone()));
            }
        }
        log.push(entry);
    }
    Ok(TrainOutcome {
        log,
        best: best.map(|(e, _, s)| (e, s)),
    })
}
