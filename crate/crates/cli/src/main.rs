//! `transdg` command-line tool.
//!
//! Every subcommand takes an optional `--config FILE` and any number of
//! `--key value` pairs, one per configuration key.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use transdg::config::RunConfig;
use transdg::pipeline;

#[derive(Parser)]
#[command(name = "transdg", version, about = "Knowledge-aware dialogue generation with KBQA transfer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic KB, QA and dialogue files into `data_dir`.
    MakeSynthetic(Settings),
    /// Train the KBQA matcher and report validation accuracy.
    PretrainKbqa(Settings),
    /// Train the dialogue model from the matcher checkpoint.
    TrainDialog(Settings),
    /// Generate draft and final responses for posts read from `input`.
    Generate(Settings),
    /// Score `generated` against `references`.
    Evaluate(Settings),
    /// Train and evaluate the full model and each ablation.
    Ablate(Settings),
}

#[derive(Args)]
struct Settings {
    /// TOML file applied on top of the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Configuration overrides, e.g. `--seed 1 --lr_dialog 0.001`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

fn parse_overrides(raw: &[String]) -> Result<(Option<PathBuf>, Vec<(String, String)>), String> {
    let mut config = None;
    let mut pairs = Vec::new();
    let mut it = raw.iter();
    while let Some(arg) = it.next() {
        let Some(key) = arg.strip_prefix("--") else {
            return Err(format!("expected `--key value`, got `{arg}`"));
        };
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| format!("`--{key}` needs a value"))?;
                (key.to_string(), v.clone())
            }
        };
        let key = key.replace('-', "_");
        if key == "config" {
            config = Some(PathBuf::from(value));
        } else {
            pairs.push((key, value));
        }
    }
    Ok((config, pairs))
}

fn run(cli: Cli) -> Result<String, String> {
    let (settings, command): (&Settings, fn(&RunConfig) -> transdg::Result<String>) = match &cli.command {
        Command::MakeSynthetic(s) => (s, pipeline::cmd_make_synthetic),
        Command::PretrainKbqa(s) => (s, pipeline::cmd_pretrain_kbqa),
        Command::TrainDialog(s) => (s, pipeline::cmd_train_dialog),
        Command::Generate(s) => (s, pipeline::cmd_generate),
        Command::Evaluate(s) => (s, pipeline::cmd_evaluate),
        Command::Ablate(s) => (s, pipeline::cmd_ablate),
    };
    let (file, pairs) = parse_overrides(&settings.overrides)?;
    let file = file.or_else(|| settings.config.clone());
    let config = RunConfig::resolve(file.as_deref(), &pairs).map_err(|e| e.to_string())?;
    log::debug!("configuration {}", config.fingerprint());
    command(&config).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
