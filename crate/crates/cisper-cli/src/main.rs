//! `cisper`: single entry point for the pipeline. Subcommands cover feature
//! extraction, training, evaluation, the ablation suite, the prompt-length
//! sweep and dataset statistics. Exit codes: 0 success, 1 user or
//! configuration error, 2 internal error (with a log pointer).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use serde_json::json;

use cisper_core::config::RunConfig;
use cisper_core::corpus::{load_dataset, split_counts, Corpus, DatasetAdapter, Split};
use cisper_core::encoders::write_feature_cache;
use cisper_core::eval::{ablation_suite, evaluate, sweep_prompt_length};
use cisper_core::model::{extract_features, features_for_corpora, CisperModel};
use cisper_core::train::{load_checkpoint, save_checkpoint, train};

#[derive(Parser)]
#[command(
    name = "cisper",
    version,
    about = "Continuous-prompt emotion recognition in conversation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Config file (flat TOML key = value document).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one config key, e.g. --set learning_rate=1e-3 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Shorthand for --set seed=N.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Shorthand for --set mode=MODE.
    #[arg(long, global = true)]
    mode: Option<String>,

    /// Shorthand for --set out_dir=DIR.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// More logging (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    /// Errors only.
    #[arg(short, long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Extract per-utterance features for every configured split and write
    /// the feature cache.
    Features,
    /// Train the model and write a checkpoint plus the training log.
    Train,
    /// Evaluate a checkpoint on the configured eval split.
    Eval {
        /// Checkpoint path; defaults to <out_dir>/model.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the four-way prompt-information ablation table.
    Ablate,
    /// Train and evaluate one run per prompt length.
    Sweep {
        /// Comma-separated prompt lengths, e.g. 1,2,3,4,5.
        #[arg(long)]
        values: String,
    },
    /// Print conversation and utterance counts per split.
    Stats,
}

enum CliError {
    User(String),
    Internal(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Internal(e.into())
    }
}

fn user_error(message: impl Into<String>) -> CliError {
    CliError::User(message.into())
}

fn config_keys_help() -> String {
    format!(
        "Config keys and their defaults (flat TOML, overridable with --set):\n\n{}",
        RunConfig::default().to_toml()
    )
}

fn main() -> ExitCode {
    let help = config_keys_help();
    let matches = Cli::command().after_long_help(help).get_matches();
    let cli = Cli::from_arg_matches(&matches).expect("matches come from the same command");

    let level = if cli.quiet {
        "error"
    } else {
        match cli.verbose {
            0 => "warn",
            1 => "info",
            _ => "debug",
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::User(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(1)
        }
        Err(CliError::Internal(e)) => {
            let log_path = PathBuf::from("cisper-error.log");
            let detail = format!("{e:?}\n");
            let _ = fs::write(&log_path, &detail);
            eprintln!("internal error: {e}; details in {}", log_path.display());
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut overrides = cli.set.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(mode) = &cli.mode {
        overrides.push(format!("mode={mode}"));
    }
    if let Some(out) = &cli.out {
        overrides.push(format!("out_dir={}", out.display()));
    }
    let config = match &cli.config {
        Some(path) => RunConfig::load(path, &overrides),
        None => RunConfig::from_overrides(&overrides),
    }
    .map_err(|e| user_error(e.to_string()))?;

    let out_dir = PathBuf::from(&config.out_dir);
    fs::create_dir_all(&out_dir)
        .map_err(|e| user_error(format!("cannot create out_dir {}: {e}", out_dir.display())))?;

    match cli.command {
        Command::Stats => cmd_stats(&config, &out_dir),
        Command::Features => cmd_features(&config, &out_dir),
        Command::Train => cmd_train(&config, &out_dir),
        Command::Eval { checkpoint } => cmd_eval(&config, &out_dir, checkpoint),
        Command::Ablate => cmd_ablate(&config, &out_dir),
        Command::Sweep { values } => cmd_sweep(&config, &out_dir, &values),
    }
}

fn write_run_metadata(config: &RunConfig, out_dir: &Path, subcommand: &str) -> Result<(), CliError> {
    let record = json!({
        "subcommand": subcommand,
        "seed": config.seed,
        "config_hash": config.config_hash(),
        "version": env!("CARGO_PKG_VERSION"),
        "config": config,
    });
    fs::write(
        out_dir.join("run_meta.json"),
        serde_json::to_string_pretty(&record).expect("metadata serializes"),
    )?;
    Ok(())
}

fn load_split(config: &RunConfig, split: Split) -> Result<Option<Corpus>, CliError> {
    let path = match split {
        Split::Train => &config.train_path,
        Split::Validation => &config.val_path,
        Split::Test => &config.test_path,
    };
    if path.is_empty() {
        return Ok(None);
    }
    let adapter = DatasetAdapter::parse(&config.adapter).map_err(|e| user_error(e.to_string()))?;
    let corpus = load_dataset(Path::new(path), adapter, split)
        .map_err(|e| user_error(format!("loading {split} split: {e}")))?;
    Ok(Some(corpus))
}

fn load_corpora(config: &RunConfig) -> Result<BTreeMap<Split, Corpus>, CliError> {
    let mut corpora = BTreeMap::new();
    for split in [Split::Train, Split::Validation, Split::Test] {
        if let Some(corpus) = load_split(config, split)? {
            corpora.insert(split, corpus);
        }
    }
    if corpora.is_empty() {
        return Err(user_error(
            "no dataset paths configured (set train_path / val_path / test_path)",
        ));
    }
    Ok(corpora)
}

fn require_train(corpora: &BTreeMap<Split, Corpus>) -> Result<&Corpus, CliError> {
    corpora
        .get(&Split::Train)
        .ok_or_else(|| user_error("this command needs train_path to be configured"))
}

fn cmd_stats(config: &RunConfig, out_dir: &Path) -> Result<(), CliError> {
    let corpora = load_corpora(config)?;
    let counts = split_counts(&corpora);
    let table = counts.render_table();
    print!("{table}");
    fs::write(out_dir.join("stats.txt"), &table)?;
    fs::write(
        out_dir.join("stats.json"),
        serde_json::to_string_pretty(&counts).expect("counts serialize"),
    )?;
    write_run_metadata(config, out_dir, "stats")
}

fn cmd_features(config: &RunConfig, out_dir: &Path) -> Result<(), CliError> {
    let cache_dir = config
        .cache_dir()
        .ok_or_else(|| user_error("features needs cache_dir (or CISPER_CACHE_DIR) set"))?;
    let corpora = load_corpora(config)?;
    let train = require_train(&corpora)?;
    let model = CisperModel::build(config, train).map_err(|e| user_error(e.to_string()))?;
    let mut all = Vec::new();
    for corpus in corpora.values() {
        all.extend(extract_features(corpus, config, &model)?);
    }
    let semantic_name = config.semantic_source.clone();
    let manifest = write_feature_cache(&all, &cache_dir, &semantic_name, "reference")?;
    println!(
        "wrote {} conversation feature blobs (d_u={}, d_c={}) to {}",
        manifest.blobs.len(),
        manifest.d_u,
        manifest.d_c,
        cache_dir.display()
    );
    write_run_metadata(config, out_dir, "features")
}

fn cmd_train(config: &RunConfig, out_dir: &Path) -> Result<(), CliError> {
    let corpora = load_corpora(config)?;
    let train_corpus = require_train(&corpora)?;
    let val_corpus = corpora.get(&Split::Validation);
    let mut model = CisperModel::build(config, train_corpus).map_err(|e| user_error(e.to_string()))?;
    let mut refs: Vec<&Corpus> = corpora.values().collect();
    refs.sort_by_key(|c| c.split_tag);
    let features = features_for_corpora(&refs, config, &model)?;
    let outcome = train(&mut model, train_corpus, val_corpus, &features, None)?;

    let ckpt_path = out_dir.join("model.ckpt");
    save_checkpoint(&outcome.checkpoint, &ckpt_path)?;
    let mut log_lines = String::new();
    for record in &outcome.log {
        log_lines.push_str(&serde_json::to_string(record).expect("record serializes"));
        log_lines.push('\n');
    }
    fs::write(out_dir.join("train_log.jsonl"), log_lines)?;
    if let Some(last) = outcome.log.last() {
        println!(
            "trained {} epochs; final train loss {:.6}; best checkpoint at {}",
            outcome.log.len(),
            last.train_loss,
            ckpt_path.display()
        );
    } else {
        println!("no epochs requested; wrote initialized checkpoint to {}", ckpt_path.display());
    }
    write_run_metadata(config, out_dir, "train")
}

fn cmd_eval(config: &RunConfig, out_dir: &Path, checkpoint: Option<PathBuf>) -> Result<(), CliError> {
    let ckpt_path = checkpoint.unwrap_or_else(|| out_dir.join("model.ckpt"));
    if !ckpt_path.exists() {
        return Err(user_error(format!("checkpoint {} does not exist", ckpt_path.display())));
    }
    let ckpt = load_checkpoint(&ckpt_path)?;

    // model geometry comes from the checkpoint; data paths and eval split
    // come from the current config
    let mut run_config = ckpt.config.clone();
    run_config.train_path = config.train_path.clone();
    run_config.val_path = config.val_path.clone();
    run_config.test_path = config.test_path.clone();
    run_config.adapter = config.adapter.clone();
    run_config.cache_dir = config.cache_dir.clone();
    run_config.eval_split = config.eval_split.clone();
    run_config.out_dir = config.out_dir.clone();

    let corpora = load_corpora(&run_config)?;
    let split = match run_config.eval_split.as_str() {
        "train" => Split::Train,
        "validation" => Split::Validation,
        _ => Split::Test,
    };
    let corpus = corpora
        .get(&split)
        .ok_or_else(|| user_error(format!("eval split '{}' has no configured path", run_config.eval_split)))?;

    let mut model =
        CisperModel::build_with_vocab(&run_config, ckpt.label_set.clone(), ckpt.vocab.clone())
            .map_err(|e| user_error(e.to_string()))?;
    model.params = ckpt.params;
    let features = features_for_corpora(&[corpus], &run_config, &model)?;
    let report = evaluate(&model, corpus, &features)?;
    print!("{}", report.render_text());
    fs::write(
        out_dir.join("eval_report.json"),
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    write_run_metadata(&run_config, out_dir, "eval")
}

fn cmd_ablate(config: &RunConfig, out_dir: &Path) -> Result<(), CliError> {
    let corpora = load_corpora(config)?;
    require_train(&corpora)?;
    let csv_path = out_dir.join("ablation.csv");
    let report = ablation_suite(config, &corpora, Some(&csv_path))?;
    println!("mode              commonsense  contextual  weighted-F1  delta");
    for row in &report.rows {
        println!(
            "{:<17} {:<12} {:<11} {:>10.4}  {:+.4}",
            row.mode,
            if row.commonsense { "yes" } else { "no" },
            if row.contextual { "yes" } else { "no" },
            row.weighted_f1,
            row.delta_vs_random
        );
    }
    fs::write(
        out_dir.join("ablation.json"),
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    println!("table written to {}", csv_path.display());
    write_run_metadata(config, out_dir, "ablate")
}

fn cmd_sweep(config: &RunConfig, out_dir: &Path, values: &str) -> Result<(), CliError> {
    let parsed: Result<Vec<usize>, _> = values
        .split(',')
        .map(|v| v.trim().parse::<usize>())
        .collect();
    let parsed = parsed.map_err(|_| user_error(format!("cannot parse --values '{values}'")))?;
    if parsed.is_empty() || parsed.iter().any(|n| *n == 0) {
        return Err(user_error("--values needs positive integers"));
    }
    let corpora = load_corpora(config)?;
    require_train(&corpora)?;
    let csv_path = out_dir.join("sweep.csv");
    let chart_path = out_dir.join("sweep.svg");
    let report = sweep_prompt_length(config, &parsed, &corpora, Some(&csv_path), Some(&chart_path))?;
    println!("N_e=N_p  pseudo tokens  weighted-F1");
    for row in &report.rows {
        println!("{:>7} {:>14} {:>12.4}", row.n, row.pseudo_token_total, row.weighted_f1);
    }
    println!("table written to {}; chart to {}", csv_path.display(), chart_path.display());
    write_run_metadata(config, out_dir, "sweep")
}
