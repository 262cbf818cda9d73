//! Run configuration.
//!
//! Values are resolved in three layers: a named preset, then an optional
//! TOML file, then `--key value` pairs from the command line. Every key of
//! [`RunConfig`] can be set in either of the last two layers. Unknown keys
//! are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dialog::{Ablation, DialogDims, DialogTrainConfig, KnowledgeWeighting};
use crate::error::{DataError, Error, Result};
use crate::kbqa::{HingeConfig, KbqaDims};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    /// Corpus and KB files, with the names written by `make-synthetic`.
    pub data_dir: PathBuf,
    /// Checkpoints, retrieval index, logs and reports.
    pub work_dir: PathBuf,
    pub seed: Option<u64>,

    pub word_dim: usize,
    pub kbqa_hidden: usize,
    pub mlp_hidden: usize,
    pub dialog_hidden: usize,
    pub layers: usize,
    pub init_scale: f64,
    pub max_words: usize,
    pub max_deps: usize,

    pub margin: f64,
    pub negatives: usize,
    pub lr_kbqa: f64,
    pub batch_kbqa: usize,
    pub epochs_kbqa: usize,
    /// Candidate facts kept per question or post.
    pub fact_cap: usize,

    /// Retrieved responses per post.
    pub retrieval_k: usize,
    pub dropout: f64,
    pub lr_dialog: f64,
    pub batch_dialog: usize,
    pub epochs_dialog: usize,
    pub max_decode_len: usize,
    pub knowledge_weighting: KnowledgeWeighting,
    pub freeze_transfer: bool,
    pub no_qrt: bool,
    pub no_kst: bool,
    pub no_rga: bool,
    pub no_ssd: bool,

    pub synthetic_questions: usize,
    pub synthetic_dialogues: usize,
    /// Seeds per variant in `ablate`, counted up from `seed`.
    pub ablation_seeds: usize,

    /// `generate`: posts, one per line; `-` reads standard input.
    pub input: PathBuf,
    /// `generate`: destination; `-` writes standard output.
    pub output: PathBuf,
    /// `evaluate`: generated responses, one per line, final response last
    /// when tab-separated.
    pub generated: PathBuf,
    /// `evaluate`: reference dialogues in the corpus format.
    pub references: PathBuf,
}

impl RunConfig {
    /// Full-scale settings.
    pub fn full() -> Self {
        RunConfig {
            preset: "full".into(),
            data_dir: "data".into(),
            work_dir: "work".into(),
            seed: None,
            word_dim: 300,
            kbqa_hidden: 256,
            mlp_hidden: 512,
            dialog_hidden: 512,
            layers: 2,
            init_scale: 0.08,
            max_words: 30_000,
            max_deps: 30_000,
            margin: 0.5,
            negatives: 20,
            lr_kbqa: 0.001,
            batch_kbqa: 128,
            epochs_kbqa: 20,
            fact_cap: 50,
            retrieval_k: 3,
            dropout: 0.2,
            lr_dialog: 0.0005,
            batch_dialog: 100,
            epochs_dialog: 20,
            max_decode_len: 30,
            knowledge_weighting: KnowledgeWeighting::Softmax,
            freeze_transfer: false,
            no_qrt: false,
            no_kst: false,
            no_rga: false,
            no_ssd: false,
            synthetic_questions: 200,
            synthetic_dialogues: 400,
            ablation_seeds: 3,
            input: "-".into(),
            output: "-".into(),
            generated: "generated.txt".into(),
            references: "data/dialog_test.tsv".into(),
        }
    }

    /// Small dimensions and faster optimization for the synthetic world.
    pub fn desk() -> Self {
        RunConfig {
            preset: "desk".into(),
            word_dim: 64,
            kbqa_hidden: 32,
            mlp_hidden: 64,
            dialog_hidden: 64,
            max_words: 2_000,
            max_deps: 200,
            lr_kbqa: 0.003,
            batch_kbqa: 16,
            lr_dialog: 0.005,
            batch_dialog: 10,
            epochs_dialog: 15,
            dropout: 0.5,
            max_decode_len: 20,
            ..Self::full()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected `full` or `desk`)"))),
        }
    }

    /// Resolves preset, file and command-line layers. `overrides` holds
    /// `(key, value)` pairs; values are parsed with the type of the key.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let file_table = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => toml::Table::new(),
        };
        let preset = overrides
            .iter()
            .rev()
            .find(|(k, _)| k == "preset")
            .map(|(_, v)| v.clone())
            .or_else(|| file_table.get("preset").and_then(|v| v.as_str()).map(str::to_string))
            .unwrap_or_else(|| "desk".to_string());
        let mut table = toml::Table::try_from(Self::preset(&preset)?).map_err(|e| Error::Config(e.to_string()))?;
        table.extend(file_table);
        for (key, raw) in overrides {
            let value = typed_value(key, raw, table.get(key))?;
            table.insert(key.clone(), value);
        }
        let config: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("word_dim", self.word_dim),
            ("kbqa_hidden", self.kbqa_hidden),
            ("mlp_hidden", self.mlp_hidden),
            ("dialog_hidden", self.dialog_hidden),
            ("layers", self.layers),
            ("max_words", self.max_words),
            ("max_deps", self.max_deps),
            ("negatives", self.negatives),
            ("batch_kbqa", self.batch_kbqa),
            ("fact_cap", self.fact_cap),
            ("batch_dialog", self.batch_dialog),
            ("max_decode_len", self.max_decode_len),
            ("ablation_seeds", self.ablation_seeds),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("`{key}` must be positive")));
            }
        }
        for (key, v) in [
            ("margin", self.margin),
            ("lr_kbqa", self.lr_kbqa),
            ("lr_dialog", self.lr_dialog),
            ("init_scale", self.init_scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("`{key}` must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("`dropout` must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    pub fn require_seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::Config("`--seed` is required for training commands".into()))
    }

    /// Stable SHA-256 over the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        crate::checkpoint::sha256_hex(&json)
    }

    pub fn kbqa_dims(&self) -> KbqaDims {
        KbqaDims {
            word_dim: self.word_dim,
            hidden: self.kbqa_hidden,
            mlp_hidden: self.mlp_hidden,
            init_scale: self.init_scale,
        }
    }

    pub fn dialog_dims(&self) -> DialogDims {
        DialogDims {
            word_dim: self.word_dim,
            hidden: self.dialog_hidden,
            layers: self.layers,
            init_scale: self.init_scale,
            kbqa: self.kbqa_dims(),
        }
    }

    pub fn ablation(&self) -> Ablation {
        Ablation {
            no_qrt: self.no_qrt,
            no_kst: self.no_kst,
            no_rga: self.no_rga,
            no_ssd: self.no_ssd,
        }
    }

    pub fn hinge(&self, seed: u64) -> HingeConfig {
        HingeConfig {
            margin: self.margin,
            negatives: self.negatives,
            learning_rate: self.lr_kbqa,
            batch_size: self.batch_kbqa,
            epochs: self.epochs_kbqa,
            seed,
        }
    }

    pub fn dialog_training(&self, seed: u64) -> DialogTrainConfig {
        DialogTrainConfig {
            learning_rate: self.lr_dialog,
            batch_size: self.batch_dialog,
            epochs: self.epochs_dialog,
            dropout: self.dropout,
            seed,
        }
    }

    pub fn data_file(&self, name: &str) -> PathBuf {
        self.data_dir.join(name)
    }

    pub fn work_file(&self, name: &str) -> PathBuf {
        self.work_dir.join(name)
    }
}

fn typed_value(key: &str, raw: &str, current: Option<&toml::Value>) -> Result<toml::Value> {
    let err = |what: &str| Error::Config(format!("`--{key}`: expected {what}, got `{raw}`"));
    Ok(match current {
        Some(toml::Value::Boolean(_)) => toml::Value::Boolean(raw.parse().map_err(|_| err("true or false"))?),
        Some(toml::Value::Integer(_)) => toml::Value::Integer(raw.parse().map_err(|_| err("an integer"))?),
        Some(toml::Value::Float(_)) => toml::Value::Float(raw.parse().map_err(|_| err("a number"))?),
        Some(toml::Value::String(_)) => toml::Value::String(raw.to_string()),
        // Optional keys are absent until set; only `seed` is optional.
        None if key == "seed" => toml::Value::Integer(raw.parse().map_err(|_| err("a non-negative integer"))?),
        None => return Err(Error::Config(format!("unknown configuration key `{key}`"))),
        Some(_) => return Err(Error::Config(format!("`{key}` cannot be set from the command line"))),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(items: &[(&str, &str)]) -> Vec<(String, String)> {
        items.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn layers_apply_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "preset = \"full\"\nlr_dialog = 0.01\nbatch_dialog = 7\n").unwrap();
        let c = RunConfig::resolve(Some(&path), &pairs(&[("batch_dialog", "9"), ("seed", "4")])).unwrap();
        assert_eq!(c.word_dim, 300);
        assert_eq!(c.lr_dialog, 0.01);
        assert_eq!(c.batch_dialog, 9);
        assert_eq!(c.seed, Some(4));
        let desk = RunConfig::resolve(None, &pairs(&[("no_kst", "true"), ("lr_kbqa", "1")])).unwrap();
        assert_eq!((desk.word_dim, desk.no_kst, desk.lr_kbqa), (64, true, 1.0));
    }

    #[test]
    fn unknown_and_invalid_keys_are_rejected() {
        assert!(RunConfig::resolve(None, &pairs(&[("lr", "0.1")])).is_err());
        assert!(RunConfig::resolve(None, &pairs(&[("layers", "0")])).is_err());
        assert!(RunConfig::resolve(None, &pairs(&[("layers", "two")])).is_err());
        assert!(RunConfig::resolve(None, &pairs(&[("preset", "huge")])).is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "mystery = 1\n").unwrap();
        assert!(matches!(RunConfig::resolve(Some(&path), &[]), Err(Error::Config(_))));
    }

    #[test]
    fn seed_is_required_for_training() {
        let c = RunConfig::resolve(None, &[]).unwrap();
        assert!(c.require_seed().is_err());
        assert_ne!(c.fingerprint(), RunConfig::full().fingerprint());
    }
}
