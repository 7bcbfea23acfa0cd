//! Experiment suites: the four-way prompt-information ablation and the
//! prompt-length sweep. Runs share seeds across configurations so score
//! differences are attributable to the configuration alone; rows stream to
//! disk as they finish so aborted suites keep partial results.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{evaluate, EvalError};
use crate::config::RunConfig;
use crate::corpus::{Corpus, Split};
use crate::model::{features_for_corpora, CisperModel, ModelError};
use crate::promptgen::PromptMode;
use crate::train::{train, TrainError};

#[derive(Debug, Error)]
pub enum SuiteError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("suite io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("suite needs a train split")]
    MissingTrainSplit,
    #[error("eval split '{0}' is not present in the corpora")]
    MissingEvalSplit(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: String,
    pub commonsense: bool,
    pub contextual: bool,
    /// Mean weighted-F1 over the repeats.
    pub weighted_f1: f64,
    /// Improvement over the no-information (random embedding) row.
    pub delta_vs_random: f64,
    pub per_seed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n: usize,
    pub pseudo_token_total: usize,
    pub weighted_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

/// Stable 64-bit seed derived from (seed, key).
pub fn derive_seed(seed: u64, key: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(key.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

fn eval_corpus<'a>(
    config: &RunConfig,
    corpora: &'a BTreeMap<Split, Corpus>,
) -> Result<&'a Corpus, SuiteError> {
    let split = match config.eval_split.as_str() {
        "train" => Split::Train,
        "validation" => Split::Validation,
        _ => Split::Test,
    };
    corpora
        .get(&split)
        .ok_or_else(|| SuiteError::MissingEvalSplit(config.eval_split.clone()))
}

/// Trains and evaluates one configuration from scratch.
pub fn run_once(
    config: &RunConfig,
    corpora: &BTreeMap<Split, Corpus>,
) -> Result<f64, SuiteError> {
    let train_corpus = corpora.get(&Split::Train).ok_or(SuiteError::MissingTrainSplit)?;
    let val_corpus = corpora.get(&Split::Validation);
    let mut model = CisperModel::build(config, train_corpus)?;
    let mut all: Vec<&Corpus> = vec![train_corpus];
    all.extend(val_corpus);
    if let Some(test) = corpora.get(&Split::Test) {
        all.push(test);
    }
    let features = features_for_corpora(&all, config, &model)?;
    train(&mut model, train_corpus, val_corpus, &features, None)?;
    let report = evaluate(&model, eval_corpus(config, corpora)?, &features)?;
    Ok(report.weighted_f1)
}

/// The four-way prompt-information table: random embeddings (no/no),
/// context-only (no/yes), commonsense-only (yes/no) and the full blend
/// (yes/yes), trained with identical seeds and budgets. Deltas are relative
/// to the random row.
pub fn ablation_suite(
    base_config: &RunConfig,
    corpora: &BTreeMap<Split, Corpus>,
    csv_out: Option<&Path>,
) -> Result<AblationReport, SuiteError> {
    let modes = [
        (PromptMode::Random, false, false),
        (PromptMode::ContextOnly, false, true),
        (PromptMode::CommonsenseOnly, true, false),
        (PromptMode::Full, true, true),
    ];
    let seeds: Vec<u64> = (0..base_config.repeats as u64)
        .map(|r| derive_seed(base_config.seed, &format!("suite-repeat-{r}")))
        .collect();

    let mut writer = csv_out
        .map(|path| {
            let mut file = fs::File::create(path).map_err(|source| SuiteError::Io {
                path: path.display().to_string(),
                source,
            })?;
            writeln!(file, "mode,commonsense,contextual,weighted_f1,delta_vs_random")
                .map_err(|source| SuiteError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
            Ok::<_, SuiteError>((file, path.to_path_buf()))
        })
        .transpose()?;

    let mut rows = Vec::new();
    let mut random_score = 0.0;
    for (mode, commonsense, contextual) in modes {
        let mut per_seed = Vec::with_capacity(seeds.len());
        for seed in &seeds {
            let mut config = base_config.clone();
            config.mode = mode;
            config.seed = *seed;
            per_seed.push(run_once(&config, corpora)?);
        }
        let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
        if mode == PromptMode::Random {
            random_score = mean;
        }
        let row = AblationRow {
            mode: mode.name().to_string(),
            commonsense,
            contextual,
            weighted_f1: mean,
            delta_vs_random: mean - random_score,
            per_seed,
        };
        if let Some((file, path)) = writer.as_mut() {
            writeln!(
                file,
                "{},{},{},{:.6},{:+.6}",
                row.mode, row.commonsense, row.contextual, row.weighted_f1, row.delta_vs_random
            )
            .map_err(|source| SuiteError::Io {
                path: path.display().to_string(),
                source,
            })?;
            file.flush().ok();
        }
        rows.push(row);
    }
    Ok(AblationReport { rows, seeds })
}

/// One seeded train+eval per prompt length; rows are independently seeded so
/// execution order does not matter.
pub fn sweep_prompt_length(
    base_config: &RunConfig,
    values: &[usize],
    corpora: &BTreeMap<Split, Corpus>,
    csv_out: Option<&Path>,
    chart_out: Option<&Path>,
) -> Result<SweepReport, SuiteError> {
    assert!(!values.is_empty(), "sweep needs at least one value");
    assert!(values.iter().all(|n| *n >= 1), "prompt lengths must be >= 1");

    let mut writer = csv_out
        .map(|path| {
            let mut file = fs::File::create(path).map_err(|source| SuiteError::Io {
                path: path.display().to_string(),
                source,
            })?;
            writeln!(file, "n,pseudo_token_total,weighted_f1").map_err(|source| SuiteError::Io {
                path: path.display().to_string(),
                source,
            })?;
            Ok::<_, SuiteError>((file, path.to_path_buf()))
        })
        .transpose()?;

    let mut rows = Vec::with_capacity(values.len());
    for n in values {
        let mut config = base_config.clone();
        config.n_e = *n;
        config.n_p = *n;
        config.seed = derive_seed(base_config.seed, &format!("sweep-n{n}"));
        let weighted_f1 = run_once(&config, corpora)?;
        let row = SweepRow {
            n: *n,
            pseudo_token_total: 4 * n,
            weighted_f1,
        };
        if let Some((file, path)) = writer.as_mut() {
            writeln!(file, "{},{},{:.6}", row.n, row.pseudo_token_total, row.weighted_f1)
                .map_err(|source| SuiteError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
            file.flush().ok();
        }
        rows.push(row);
    }
    let report = SweepReport { rows };
    if let Some(path) = chart_out {
        fs::write(path, render_sweep_chart(&report)).map_err(|source| SuiteError::Io {
            path: path.display().to_string(),
            source,
        })?;
    }
    Ok(report)
}

/// Line chart of weighted-F1 against N_e (= N_p), as a standalone SVG.
pub fn render_sweep_chart(report: &SweepReport) -> String {
    let width = 640.0;
    let height = 400.0;
    let margin = 60.0;
    let xs: Vec<f64> = report.rows.iter().map(|r| r.n as f64).collect();
    let ys: Vec<f64> = report.rows.iter().map(|r| r.weighted_f1).collect();
    let x_min = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let x_max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max).max(x_min + 1e-9);
    let y_min = 0.0;
    let y_max = 1.0;
    let to_x = |v: f64| margin + (v - x_min) / (x_max - x_min) * (width - 2.0 * margin);
    let to_y = |v: f64| height - margin - (v - y_min) / (y_max - y_min) * (height - 2.0 * margin);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n<line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = margin,
        b = height - margin,
        r = width - margin,
        t = margin
    ));
    let points: Vec<String> = xs
        .iter()
        .zip(ys.iter())
        .map(|(x, y)| format!("{:.2},{:.2}", to_x(*x), to_y(*y)))
        .collect();
    if points.len() > 1 {
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\"/>\n",
            points.join(" ")
        ));
    }
    for ((x, y), row) in xs.iter().zip(ys.iter()).zip(report.rows.iter()) {
        svg.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"steelblue\"/>\n",
            to_x(*x),
            to_y(*y)
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\" text-anchor=\"middle\">{:.3}</text>\n",
            to_x(*x),
            to_y(*y) - 10.0,
            row.weighted_f1
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n",
            to_x(*x),
            height - margin + 20.0,
            row.n
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"13\" text-anchor=\"middle\">prompt length N_e = N_p</text>\n",
        width / 2.0,
        height - 15.0
    ));
    svg.push_str(&format!(
        "<text x=\"18\" y=\"{:.2}\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 18 {:.2})\">weighted-F1</text>\n",
        height / 2.0,
        height / 2.0
    ));
    svg.push_str("</svg>\n");
    svg
}
