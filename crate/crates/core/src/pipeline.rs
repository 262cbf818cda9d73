//! Commands behind the command-line tool: synthetic data, matcher
//! pre-training, dialogue training, generation, evaluation and ablations.
//!
//! Every command reads its inputs from the configured directories, writes
//! its artifacts into `work_dir`, and returns the text it reports. Given the
//! same configuration and seed, every artifact is byte-identical across
//! reruns.
//!
//! Files under `work_dir`:
//!
//! | file | written by |
//! |---|---|
//! | `kbqa.ckpt`, `kbqa_log.txt` | `pretrain-kbqa` |
//! | `dialog.ckpt`, `dialog_log.txt`, `index.json` | `train-dialog` |
//! | `eval.json` | `evaluate` |
//! | `ablation.txt`, `ablation.json` | `ablate` |

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::Read as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::corpus::{load_dialog, load_kb, load_qa, stub_dependency_parse, tokenize, write_file, DialogRecord, EntityLexicon};
use crate::dataset::{build_vocabularies, retrieval_index, Lookup, Prepared};
use crate::dialog::{train_dialog, Ablation, DialogDims, DialogModel, EpochLog, KnowledgeWeighting};
use crate::error::{DataError, Error, Result};
use crate::kb::{EncodedKb, FactIndex, KnowledgeBase};
use crate::kbqa::{default_candidates, eval_kbqa, train_kbqa, KbqaDims, KbqaModel};
use crate::metrics::{bleu, entity_score, perplexity, EvalReport};
use crate::params::ParamStore;
use crate::retrieval::TfIdfIndex;
use crate::rng::derive_seed;
use crate::synthetic::{make_synthetic, SyntheticPaths, SyntheticSizes};
use crate::vocab::{Vocabularies, UNK};

const STREAM_KBQA_INIT: u64 = 21;
const STREAM_DIALOG_INIT: u64 = 22;

pub const KBQA_CHECKPOINT: &str = "kbqa.ckpt";
pub const DIALOG_CHECKPOINT: &str = "dialog.ckpt";
pub const INDEX_FILE: &str = "index.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KbqaMeta {
    pub kind: String,
    pub vocabs: Vocabularies,
    pub dims: KbqaDims,
    pub seed: u64,
    pub config_sha256: String,
    pub valid_accuracy: f64,
    pub valid_f1: f64,
}

/// Which matcher checkpoint a dialogue model was initialized from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DialogMeta {
    pub kind: String,
    pub vocabs: Vocabularies,
    pub dims: DialogDims,
    pub ablation: Ablation,
    pub weighting: KnowledgeWeighting,
    pub seed: u64,
    pub config_sha256: String,
    pub transferred_from: Option<Provenance>,
    /// Names of parameters frozen during training.
    pub frozen: Vec<String>,
    pub best_epoch: Option<usize>,
}

fn require_files(paths: &[PathBuf]) -> Result<()> {
    let missing: Vec<PathBuf> = paths.iter().filter(|p| !p.is_file()).cloned().collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::MissingFiles(missing))
    }
}

fn files(cfg: &RunConfig) -> SyntheticPaths {
    SyntheticPaths::in_dir(&cfg.data_dir)
}

/// Writes the synthetic world into `data_dir`.
pub fn cmd_make_synthetic(cfg: &RunConfig) -> Result<String> {
    let seed = cfg.seed.unwrap_or(0);
    let sizes = SyntheticSizes {
        questions: cfg.synthetic_questions,
        dialogues: cfg.synthetic_dialogues,
    };
    let corpus = make_synthetic(seed, sizes);
    let paths = corpus.write(&cfg.data_dir)?;
    Ok(format!(
        "kb={} facts\nqa_train={}\nqa_valid={}\ndialog_train={}\ndialog_valid={}\ndialog_test={}\ndir={}\n",
        corpus.kb.len(),
        corpus.qa_train.len(),
        corpus.qa_valid.len(),
        corpus.dialog_train.len(),
        corpus.dialog_valid.len(),
        corpus.dialog_test.len(),
        paths.kb.parent().unwrap_or(Path::new(".")).display()
    ))
}

/// A trained matcher, as loaded from its checkpoint.
pub struct KbqaSource {
    pub meta: KbqaMeta,
    pub store: ParamStore,
    pub provenance: Provenance,
}

pub fn load_kbqa(path: &Path) -> Result<KbqaSource> {
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    let (meta, params): (KbqaMeta, _) = checkpoint::decode(&bytes)?;
    let mut store = ParamStore::new();
    let v = &meta.vocabs;
    KbqaModel::new(
        &mut store,
        meta.dims,
        v.words.len(),
        v.deps.len(),
        v.relations.len(),
        &mut ChaCha8Rng::seed_from_u64(0),
    );
    checkpoint::restore(&mut store, params)?;
    let provenance = Provenance {
        path: path.display().to_string(),
        sha256: checkpoint::sha256_hex(&bytes),
    };
    Ok(KbqaSource { meta, store, provenance })
}

pub fn cmd_pretrain_kbqa(cfg: &RunConfig) -> Result<String> {
    let seed = cfg.require_seed()?;
    let paths = files(cfg);
    require_files(&[paths.kb.clone(), paths.qa_train.clone(), paths.qa_valid.clone()])?;
    let kb = KnowledgeBase::new(load_kb(&paths.kb)?)?;
    let qa_train = load_qa(&paths.qa_train)?;
    let qa_valid = load_qa(&paths.qa_valid)?;
    // Training dialogues join the vocabulary so that the dialogue model can
    // reuse the matcher's ids.
    let dialog = if paths.dialog_train.is_file() {
        load_dialog(&paths.dialog_train)?
    } else {
        Vec::new()
    };
    let vocabs = build_vocabularies(&kb, &qa_train, &dialog, cfg.max_words, cfg.max_deps)?;
    let encoded = kb.encode(&vocabs.words, &vocabs.relations)?;
    let index = FactIndex::build(&encoded, &vocabs.words);
    let train: Vec<_> = qa_train.iter().map(|q| q.encode(&vocabs.words, &vocabs.deps)).collect();
    let valid: Vec<_> = qa_valid.iter().map(|q| q.encode(&vocabs.words, &vocabs.deps)).collect();

    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[STREAM_KBQA_INIT]));
    let dims = cfg.kbqa_dims();
    let model = KbqaModel::new(
        &mut store,
        dims,
        vocabs.words.len(),
        vocabs.deps.len(),
        vocabs.relations.len(),
        &mut rng,
    );
    let losses = train_kbqa(&model, &mut store, &train, &encoded, &cfg.hinge(seed))?;
    let candidates = default_candidates(&valid, &index, cfg.fact_cap);
    let eval = eval_kbqa(&model, &store, &valid, &encoded, &candidates)?;

    let mut log = String::new();
    for (e, l) in losses.iter().enumerate() {
        let _ = writeln!(log, "epoch={} loss={:.6}", e + 1, l);
    }
    let summary = format!(
        "accuracy={:.6}\nprecision={:.6}\nrecall={:.6}\nf1={:.6}\nquestions={}\n",
        eval.accuracy, eval.precision, eval.recall, eval.f1, eval.questions
    );
    log.push_str(&summary);
    write_file(&cfg.work_file("kbqa_log.txt"), &log)?;
    let meta = KbqaMeta {
        kind: "kbqa".into(),
        vocabs,
        dims,
        seed,
        config_sha256: cfg.fingerprint(),
        valid_accuracy: eval.accuracy,
        valid_f1: eval.f1,
    };
    checkpoint::save(&cfg.work_file(KBQA_CHECKPOINT), &meta, &store)?;
    Ok(summary)
}

/// Knowledge, retrieval and vocabulary shared by every dialogue command.
pub struct DialogContext {
    pub vocabs: Vocabularies,
    pub kb: KnowledgeBase,
    pub encoded: EncodedKb,
    pub facts: FactIndex,
    pub index: TfIdfIndex,
    pub lexicon: EntityLexicon,
    pub fact_cap: usize,
}

impl DialogContext {
    pub fn new(vocabs: Vocabularies, kb: KnowledgeBase, index: TfIdfIndex, fact_cap: usize) -> Result<Self> {
        let encoded = kb.encode(&vocabs.words, &vocabs.relations)?;
        let facts = FactIndex::build(&encoded, &vocabs.words);
        let lexicon = kb.entity_lexicon();
        Ok(DialogContext {
            vocabs,
            kb,
            encoded,
            facts,
            index,
            lexicon,
            fact_cap,
        })
    }

    pub fn lookup(&self) -> Lookup<'_> {
        Lookup {
            vocabs: &self.vocabs,
            kb: &self.encoded,
            facts: &self.facts,
            index: &self.index,
            fact_cap: self.fact_cap,
        }
    }

    /// Instance for a raw post, with the stand-in dependency parse.
    pub fn post_instance(&self, post: &[String]) -> Result<(crate::dialog::DialogInstance, BTreeSet<String>)> {
        let deps = stub_dependency_parse(post, &self.lexicon);
        self.lookup().instance(post, &deps, None, None)
    }
}

pub struct TrainedDialog {
    pub model: DialogModel,
    pub store: ParamStore,
    pub log: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
}

/// Builds, transfers into and trains one dialogue model. The returned store
/// is the best-validation snapshot when `valid` is non-empty.
pub fn train_variant(
    cfg: &RunConfig,
    vocabs: &Vocabularies,
    source: Option<&KbqaSource>,
    train: &Prepared,
    valid: &Prepared,
    seed: u64,
) -> Result<TrainedDialog> {
    let dims = cfg.dialog_dims();
    if let Some(src) = source {
        if src.meta.dims != dims.kbqa {
            let (a, b) = (src.meta.dims, dims.kbqa);
            return Err(Error::Config(format!(
                "matcher checkpoint has word_dim={} kbqa_hidden={} mlp_hidden={} but the configuration has word_dim={} kbqa_hidden={} mlp_hidden={}",
                a.word_dim, a.hidden, a.mlp_hidden, b.word_dim, b.hidden, b.mlp_hidden
            )));
        }
    }
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[STREAM_DIALOG_INIT]));
    let model = DialogModel::new(
        &mut store,
        dims,
        cfg.ablation(),
        cfg.knowledge_weighting,
        vocabs.words.len(),
        vocabs.deps.len(),
        &mut rng,
    )?;
    if let Some(src) = source {
        let copied = model.load_transfer(&mut store, &src.store, &src.meta.vocabs.words, &vocabs.words)?;
        log::info!("transferred matcher layers and {copied} word vectors");
    }
    model.freeze_transfer(&mut store, cfg.freeze_transfer);
    let outcome = train_dialog(&model, &mut store, &train.instances, &valid.instances, &cfg.dialog_training(seed))?;
    let (best_epoch, store) = match outcome.best {
        Some((epoch, best)) => (Some(epoch), best),
        None => (None, store),
    };
    Ok(TrainedDialog {
        model,
        store,
        log: outcome.log,
        best_epoch,
    })
}

fn needs_transfer(cfg: &RunConfig) -> bool {
    !(cfg.no_qrt && cfg.no_kst)
}

fn load_source(cfg: &RunConfig) -> Result<Option<KbqaSource>> {
    if !needs_transfer(cfg) {
        return Ok(None);
    }
    let path = cfg.work_file(KBQA_CHECKPOINT);
    if !path.is_file() {
        return Err(Error::Config(format!(
            "transferred matcher checkpoint {} is missing; run pretrain-kbqa first or set both no_qrt and no_kst",
            path.display()
        )));
    }
    Ok(Some(load_kbqa(&path)?))
}

/// Loaded corpus and knowledge for dialogue training and evaluation.
pub struct DialogData {
    pub context: DialogContext,
    pub train: Vec<DialogRecord>,
    pub valid: Vec<DialogRecord>,
    pub test: Vec<DialogRecord>,
}

fn load_dialog_data(cfg: &RunConfig, source: Option<&KbqaSource>) -> Result<DialogData> {
    let paths = files(cfg);
    require_files(&[
        paths.kb.clone(),
        paths.dialog_train.clone(),
        paths.dialog_valid.clone(),
        paths.dialog_test.clone(),
    ])?;
    let kb = KnowledgeBase::new(load_kb(&paths.kb)?)?;
    let train = load_dialog(&paths.dialog_train)?;
    let valid = load_dialog(&paths.dialog_valid)?;
    let test = load_dialog(&paths.dialog_test)?;
    let vocabs = match source {
        Some(src) => src.meta.vocabs.clone(),
        None => {
            let qa = if paths.qa_train.is_file() {
                load_qa(&paths.qa_train)?
            } else {
                Vec::new()
            };
            build_vocabularies(&kb, &qa, &train, cfg.max_words, cfg.max_deps)?
        }
    };
    let index = retrieval_index(&train, cfg.retrieval_k);
    let context = DialogContext::new(vocabs, kb, index, cfg.fact_cap)?;
    Ok(DialogData {
        context,
        train,
        valid,
        test,
    })
}

fn format_log(log: &[EpochLog], best: Option<usize>) -> String {
    let mut s = String::new();
    for e in log {
        let valid = e.valid.map_or("-".to_string(), |v| format!("{v:.6}"));
        let _ = writeln!(
            s,
            "epoch={} l1={:.6} l2={:.6} total={:.6} valid={}",
            e.epoch, e.l1, e.l2, e.total, valid
        );
    }
    let _ = writeln!(s, "best_epoch={}", best.map_or("-".to_string(), |b| b.to_string()));
    s
}

pub fn cmd_train_dialog(cfg: &RunConfig) -> Result<String> {
    let seed = cfg.require_seed()?;
    let source = load_source(cfg)?;
    let data = load_dialog_data(cfg, source.as_ref())?;
    data.context.index.save(&cfg.work_file(INDEX_FILE))?;
    let lookup = data.context.lookup();
    let train = lookup.prepare(&data.train, true)?;
    let valid = lookup.prepare(&data.valid, false)?;
    let trained = train_variant(cfg, &data.context.vocabs, source.as_ref(), &train, &valid, seed)?;

    let log = format_log(&trained.log, trained.best_epoch);
    write_file(&cfg.work_file("dialog_log.txt"), &log)?;
    let frozen = trained
        .store
        .iter()
        .filter(|(_, p)| p.frozen)
        .map(|(_, p)| p.name.clone())
        .collect();
    let meta = DialogMeta {
        kind: "dialog".into(),
        vocabs: data.context.vocabs.clone(),
        dims: trained.model.dims,
        ablation: trained.model.ablation,
        weighting: trained.model.weighting,
        seed,
        config_sha256: cfg.fingerprint(),
        transferred_from: source.map(|s| s.provenance),
        frozen,
        best_epoch: trained.best_epoch,
    };
    checkpoint::save(&cfg.work_file(DIALOG_CHECKPOINT), &meta, &trained.store)?;
    Ok(log)
}

/// A trained dialogue model with its serving context.
pub struct LoadedDialog {
    pub meta: DialogMeta,
    pub model: DialogModel,
    pub store: ParamStore,
    pub context: DialogContext,
}

pub fn load_dialog_model(cfg: &RunConfig) -> Result<LoadedDialog> {
    let ckpt = cfg.work_file(DIALOG_CHECKPOINT);
    let index_path = cfg.work_file(INDEX_FILE);
    let kb_path = files(cfg).kb;
    require_files(&[ckpt.clone(), index_path.clone(), kb_path.clone()])?;
    let (meta, params): (DialogMeta, _) = checkpoint::load(&ckpt)?;
    let mut store = ParamStore::new();
    let model = DialogModel::new(
        &mut store,
        meta.dims,
        meta.ablation,
        meta.weighting,
        meta.vocabs.words.len(),
        meta.vocabs.deps.len(),
        &mut ChaCha8Rng::seed_from_u64(0),
    )?;
    checkpoint::restore(&mut store, params)?;
    let kb = KnowledgeBase::new(load_kb(&kb_path)?)?;
    let index = TfIdfIndex::load(&index_path)?;
    let context = DialogContext::new(meta.vocabs.clone(), kb, index, cfg.fact_cap)?;
    Ok(LoadedDialog {
        meta,
        model,
        store,
        context,
    })
}

/// Greedy draft and final response of each post, as words.
pub fn generate_responses(
    model: &DialogModel,
    store: &ParamStore,
    vocabs: &Vocabularies,
    instances: &[crate::dialog::DialogInstance],
    max_len: usize,
) -> Result<Vec<(Vec<String>, Vec<String>)>> {
    instances
        .iter()
        .map(|inst| {
            let out = model.generate(store, inst, max_len)?;
            Ok((vocabs.words.decode(&out.draft), vocabs.words.decode(&out.response)))
        })
        .collect()
}

fn read_input(path: &Path) -> Result<String> {
    if path == Path::new("-") {
        let mut s = String::new();
        std::io::stdin()
            .read_to_string(&mut s)
            .map_err(|e| DataError::io("<stdin>", e))?;
        Ok(s)
    } else {
        std::fs::read_to_string(path).map_err(|e| DataError::io(path, e).into())
    }
}

/// One `draft<TAB>final` line per input line.
pub fn generate_text(loaded: &LoadedDialog, input: &str, max_len: usize) -> Result<String> {
    let mut out = String::new();
    for (n, line) in input.lines().enumerate() {
        let post = tokenize(line);
        if post.is_empty() {
            log::warn!("line {}: empty post, writing an empty row", n + 1);
            out.push_str("\t\n");
            continue;
        }
        let (inst, _) = loaded.context.post_instance(&post)?;
        if inst.post.iter().all(|&id| id == UNK) {
            log::warn!("line {}: every word is out of vocabulary", n + 1);
        }
        let g = loaded.model.generate(&loaded.store, &inst, max_len)?;
        let words = &loaded.context.vocabs.words;
        let _ = writeln!(out, "{}\t{}", words.decode(&g.draft).join(" "), words.decode(&g.response).join(" "));
    }
    Ok(out)
}

pub fn cmd_generate(cfg: &RunConfig) -> Result<String> {
    let loaded = load_dialog_model(cfg)?;
    let input = read_input(&cfg.input)?;
    let text = generate_text(&loaded, &input, cfg.max_decode_len)?;
    if cfg.output == Path::new("-") {
        Ok(text)
    } else {
        write_file(&cfg.output, &text)?;
        Ok(String::new())
    }
}

/// Perplexity of the gold responses plus entity score and BLEU of
/// `generated` against them.
pub fn evaluate_generations(
    model: &DialogModel,
    store: &ParamStore,
    prepared: &Prepared,
    references: &[DialogRecord],
    generated: &[Vec<String>],
) -> Result<EvalReport> {
    if generated.len() != references.len() || prepared.instances.len() != references.len() {
        return Err(Error::Contract(format!(
            "{} generated responses for {} references",
            generated.len(),
            references.len()
        )));
    }
    let (mut nll, mut tokens) = (0.0, 0);
    for inst in &prepared.instances {
        let (a, n) = model.response_nll(store, inst)?;
        nll += a;
        tokens += n;
    }
    let refs: Vec<&[String]> = references.iter().map(|r| r.response.as_slice()).collect();
    let refs: Vec<Vec<&str>> = refs.iter().map(|r| r.iter().map(String::as_str).collect()).collect();
    let b = |n| bleu(generated, &refs, n);
    Ok(EvalReport {
        ppl: perplexity(nll, tokens),
        entity: entity_score(generated, &prepared.entity_words)?,
        bleu1: b(1)?,
        bleu2: b(2)?,
        bleu3: b(3)?,
        bleu4: b(4)?,
        pairs: references.len(),
        tokens,
    })
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<String> {
    require_files(&[cfg.generated.clone(), cfg.references.clone()])?;
    let loaded = load_dialog_model(cfg)?;
    let references = load_dialog(&cfg.references)?;
    let generated: Vec<Vec<String>> = read_input(&cfg.generated)?
        .lines()
        .map(|l| l.rsplit('\t').next().unwrap_or("").split_whitespace().map(str::to_string).collect())
        .collect();
    let prepared = loaded.context.lookup().prepare(&references, false)?;
    let report = evaluate_generations(&loaded.model, &loaded.store, &prepared, &references, &generated)?;
    write_file(&cfg.work_file("eval.json"), &report.to_json())?;
    Ok(report.to_key_value())
}

/// The full model followed by one run per removed module.
pub const VARIANTS: [&str; 5] = ["full", "no_qrt", "no_kst", "no_rga", "no_ssd"];

pub fn variant_config(cfg: &RunConfig, variant: &str) -> Result<RunConfig> {
    let mut c = cfg.clone();
    c.no_qrt = false;
    c.no_kst = false;
    c.no_rga = false;
    c.no_ssd = false;
    match variant {
        "full" => {}
        "no_qrt" => c.no_qrt = true,
        "no_kst" => c.no_kst = true,
        "no_rga" => c.no_rga = true,
        "no_ssd" => c.no_ssd = true,
        other => return Err(Error::Config(format!("unknown ablation variant `{other}`"))),
    }
    Ok(c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub report: EvalReport,
}

/// Trains `variant` and evaluates it on the test dialogues.
pub fn run_variant(
    cfg: &RunConfig,
    variant: &str,
    seed: u64,
    data: &DialogData,
    source: Option<&KbqaSource>,
) -> Result<AblationRow> {
    let vcfg = variant_config(cfg, variant)?;
    let lookup = data.context.lookup();
    let train = lookup.prepare(&data.train, true)?;
    let valid = lookup.prepare(&data.valid, false)?;
    let test = lookup.prepare(&data.test, false)?;
    let trained = train_variant(&vcfg, &data.context.vocabs, source, &train, &valid, seed)?;
    let responses: Vec<Vec<String>> = generate_responses(
        &trained.model,
        &trained.store,
        &data.context.vocabs,
        &test.instances,
        cfg.max_decode_len,
    )?
    .into_iter()
    .map(|(_, r)| r)
    .collect();
    let report = evaluate_generations(&trained.model, &trained.store, &test, &data.test, &responses)?;
    Ok(AblationRow {
        variant: variant.to_string(),
        seed,
        report,
    })
}

/// Loads the data and matcher checkpoint `ablate` needs.
pub fn load_ablation_inputs(cfg: &RunConfig) -> Result<(DialogData, KbqaSource)> {
    let path = cfg.work_file(KBQA_CHECKPOINT);
    if !path.is_file() {
        return Err(Error::Config(format!(
            "ablation needs the matcher checkpoint {}; run pretrain-kbqa first",
            path.display()
        )));
    }
    let source = load_kbqa(&path)?;
    let data = load_dialog_data(cfg, Some(&source))?;
    Ok((data, source))
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<String> {
    let base = cfg.require_seed()?;
    let (data, source) = load_ablation_inputs(cfg)?;
    let mut rows = Vec::new();
    for s in 0..cfg.ablation_seeds as u64 {
        for variant in VARIANTS {
            let row = run_variant(cfg, variant, base + s, &data, Some(&source))?;
            log::info!("{} seed {} entity {:.4}", variant, row.seed, row.report.entity);
            rows.push(row);
        }
    }
    let mut text = String::new();
    for r in &rows {
        let p = &r.report;
        let _ = writeln!(
            text,
            "variant={} seed={} ppl={:.6} entity={:.6} bleu1={:.6} bleu2={:.6} bleu3={:.6} bleu4={:.6}",
            r.variant, r.seed, p.ppl, p.entity, p.bleu1, p.bleu2, p.bleu3, p.bleu4
        );
    }
    let entity = |variant: &str, seed: u64| {
        rows.iter()
            .find(|r| r.variant == variant && r.seed == seed)
            .map(|r| r.report.entity)
    };
    let seeds: Vec<u64> = (0..cfg.ablation_seeds as u64).map(|s| base + s).collect();
    let wins = seeds.iter().filter(|&&s| entity("full", s) > entity("no_kst", s)).count();
    let _ = writeln!(text, "full_beats_no_kst_entity={}/{}", wins, seeds.len());
    write_file(&cfg.work_file("ablation.txt"), &text)?;
    let json = serde_json::to_string_pretty(&rows).map_err(|e| Error::Contract(e.to_string()))?;
    write_file(&cfg.work_file("ablation.json"), &json)?;
    Ok(text)
}
