//! Conversation corpora: typed utterances, dataset adapters and split
//! statistics.
//!
//! The canonical on-disk format is line-delimited JSON with keys
//! `conversation_id`, `index`, `speaker`, `text` and optional `emotion`.
//! The MELD CSV and EmoryNLP JSON adapters normalize into it.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("unknown dataset adapter '{0}' (expected meld-csv, emorynlp-json or generic-jsonl)")]
    UnknownAdapter(String),
    #[error("malformed dataset: conversation '{conversation_id}': {reason}")]
    Malformed {
        conversation_id: String,
        reason: String,
    },
    #[error("parse error at {path}:{line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("corpus has no labeled utterances")]
    EmptyLabels,
    #[error("label '{label}' in split '{split}' does not occur in the training split")]
    LabelOutsideTrain { label: String, split: String },
}

/// Dataset file format handled by [`load_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetAdapter {
    MeldCsv,
    EmorynlpJson,
    GenericJsonl,
}

impl DatasetAdapter {
    pub fn parse(name: &str) -> Result<Self, CorpusError> {
        match name {
            "meld-csv" => Ok(DatasetAdapter::MeldCsv),
            "emorynlp-json" => Ok(DatasetAdapter::EmorynlpJson),
            "generic-jsonl" => Ok(DatasetAdapter::GenericJsonl),
            other => Err(CorpusError::UnknownAdapter(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DatasetAdapter::MeldCsv => "meld-csv",
            DatasetAdapter::EmorynlpJson => "emorynlp-json",
            DatasetAdapter::GenericJsonl => "generic-jsonl",
        }
    }
}

impl fmt::Display for DatasetAdapter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One utterance within a conversation. `index` is the 0-based position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub conversation_id: String,
    pub index: usize,
    pub speaker: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emotion: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub utterances: Vec<Utterance>,
}

impl Conversation {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        };
        f.write_str(s)
    }
}

/// An immutable set of conversations plus the emotion label set derived from
/// them in first-seen order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub conversations: Vec<Conversation>,
    pub label_set: Vec<String>,
    pub split_tag: Split,
}

impl Corpus {
    /// Builds a corpus from loose utterances: groups by conversation id,
    /// orders by (conversation_id, index) and validates index contiguity.
    pub fn from_utterances(
        mut utterances: Vec<Utterance>,
        split_tag: Split,
    ) -> Result<Self, CorpusError> {
        for u in utterances.iter_mut() {
            if let Some(e) = u.emotion.as_mut() {
                *e = e.trim().to_lowercase();
            }
        }
        for u in &utterances {
            if u.text.is_empty() {
                return Err(CorpusError::Malformed {
                    conversation_id: u.conversation_id.clone(),
                    reason: format!("utterance {} has empty text", u.index),
                });
            }
        }
        let mut grouped: BTreeMap<String, Vec<Utterance>> = BTreeMap::new();
        for u in utterances {
            grouped.entry(u.conversation_id.clone()).or_default().push(u);
        }
        let mut conversations = Vec::with_capacity(grouped.len());
        for (id, mut utts) in grouped {
            utts.sort_by_key(|u| u.index);
            for (expected, u) in utts.iter().enumerate() {
                if u.index != expected {
                    let reason = if utts.iter().filter(|o| o.index == u.index).count() > 1 {
                        format!("duplicate utterance index {}", u.index)
                    } else {
                        format!("indices are not contiguous from 0 (found {} at position {})", u.index, expected)
                    };
                    return Err(CorpusError::Malformed {
                        conversation_id: id,
                        reason,
                    });
                }
            }
            conversations.push(Conversation { id, utterances: utts });
        }
        let mut label_set = Vec::new();
        let mut seen = HashSet::new();
        for conv in &conversations {
            for u in &conv.utterances {
                if let Some(e) = &u.emotion {
                    if seen.insert(e.clone()) {
                        label_set.push(e.clone());
                    }
                }
            }
        }
        Ok(Corpus {
            conversations,
            label_set,
            split_tag,
        })
    }

    pub fn conversation_count(&self) -> usize {
        self.conversations.len()
    }

    pub fn utterance_count(&self) -> usize {
        self.conversations.iter().map(Conversation::len).sum()
    }

    /// The ordered emotion categories; errors when nothing is labeled.
    pub fn label_set(&self) -> Result<&[String], CorpusError> {
        if self.label_set.is_empty() {
            Err(CorpusError::EmptyLabels)
        } else {
            Ok(&self.label_set)
        }
    }

    pub fn get(&self, conversation_id: &str) -> Option<&Conversation> {
        self.conversations.iter().find(|c| c.id == conversation_id)
    }

    /// Writes the canonical line-delimited JSON form.
    pub fn write_jsonl(&self, path: &Path) -> Result<(), CorpusError> {
        let mut file = File::create(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        for conv in &self.conversations {
            for u in &conv.utterances {
                let line = serde_json::to_string(u).expect("utterance serializes");
                writeln!(file, "{line}").map_err(|source| CorpusError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
            }
        }
        Ok(())
    }
}

/// Loads a dataset file through the named adapter.
pub fn load_dataset(
    path: &Path,
    adapter: DatasetAdapter,
    split_tag: Split,
) -> Result<Corpus, CorpusError> {
    let utterances = match adapter {
        DatasetAdapter::GenericJsonl => read_generic_jsonl(path)?,
        DatasetAdapter::MeldCsv => read_meld_csv(path)?,
        DatasetAdapter::EmorynlpJson => read_emorynlp_json(path)?,
    };
    Corpus::from_utterances(utterances, split_tag)
}

fn read_generic_jsonl(path: &Path) -> Result<Vec<Utterance>, CorpusError> {
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (line_no, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let u: Utterance = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            path: path.display().to_string(),
            line: line_no + 1,
            reason: e.to_string(),
        })?;
        out.push(u);
    }
    Ok(out)
}

/// The published MELD CSV columns: Utterance, Speaker, Emotion, Dialogue_ID,
/// Utterance_ID. Extra columns (sentiment, timestamps, episode metadata) are
/// ignored.
fn read_meld_csv(path: &Path) -> Result<Vec<Utterance>, CorpusError> {
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(BufReader::new(file));
    let headers = reader
        .headers()
        .map_err(|e| CorpusError::Parse {
            path: path.display().to_string(),
            line: 1,
            reason: e.to_string(),
        })?
        .clone();
    let col = |name: &str| -> Result<usize, CorpusError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CorpusError::Parse {
                path: path.display().to_string(),
                line: 1,
                reason: format!("missing column '{name}'"),
            })
    };
    let c_utt = col("Utterance")?;
    let c_speaker = col("Speaker")?;
    let c_emotion = col("Emotion")?;
    let c_dialogue = col("Dialogue_ID")?;
    let c_utt_id = col("Utterance_ID")?;

    let mut out = Vec::new();
    for (line_no, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CorpusError::Parse {
            path: path.display().to_string(),
            line: line_no + 2,
            reason: e.to_string(),
        })?;
        let field = |idx: usize| -> Result<&str, CorpusError> {
            record.get(idx).ok_or_else(|| CorpusError::Parse {
                path: path.display().to_string(),
                line: line_no + 2,
                reason: format!("row has only {} fields", record.len()),
            })
        };
        let index: usize = field(c_utt_id)?.trim().parse().map_err(|_| CorpusError::Parse {
            path: path.display().to_string(),
            line: line_no + 2,
            reason: format!("Utterance_ID '{}' is not an integer", field(c_utt_id).unwrap_or("")),
        })?;
        out.push(Utterance {
            conversation_id: field(c_dialogue)?.trim().to_string(),
            index,
            speaker: field(c_speaker)?.to_string(),
            text: field(c_utt)?.to_string(),
            emotion: Some(field(c_emotion)?.to_string()),
        });
    }
    Ok(out)
}

#[derive(Deserialize)]
struct EmoryEpisodes {
    episodes: Vec<EmoryEpisode>,
}

#[derive(Deserialize)]
struct EmoryEpisode {
    #[serde(default)]
    episode_id: Option<String>,
    scenes: Vec<EmoryScene>,
}

#[derive(Deserialize)]
struct EmoryScene {
    #[serde(default)]
    scene_id: Option<String>,
    utterances: Vec<EmoryUtterance>,
}

#[derive(Deserialize)]
struct EmoryUtterance {
    #[serde(default)]
    transcript: String,
    #[serde(default)]
    speakers: Vec<String>,
    #[serde(default)]
    emotion: Option<String>,
}

/// EmoryNLP emotion-detection JSON: episodes contain scenes, each scene is
/// one conversation.
fn read_emorynlp_json(path: &Path) -> Result<Vec<Utterance>, CorpusError> {
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let parsed: EmoryEpisodes =
        serde_json::from_reader(BufReader::new(file)).map_err(|e| CorpusError::Parse {
            path: path.display().to_string(),
            line: 0,
            reason: e.to_string(),
        })?;
    let mut out = Vec::new();
    for (ep_i, episode) in parsed.episodes.iter().enumerate() {
        let ep_id = episode
            .episode_id
            .clone()
            .unwrap_or_else(|| format!("ep{ep_i}"));
        for (sc_i, scene) in episode.scenes.iter().enumerate() {
            let conv_id = scene
                .scene_id
                .clone()
                .unwrap_or_else(|| format!("{ep_id}_sc{sc_i}"));
            for (index, u) in scene.utterances.iter().enumerate() {
                out.push(Utterance {
                    conversation_id: conv_id.clone(),
                    index,
                    speaker: u.speakers.join(" & "),
                    text: u.transcript.clone(),
                    emotion: u.emotion.clone(),
                });
            }
        }
    }
    Ok(out)
}

/// Per-split conversation/utterance counts, laid out like the dataset
/// statistics table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub rows: Vec<SplitCountRow>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCountRow {
    pub split: Split,
    pub conversations: usize,
    pub utterances: usize,
}

/// Counts conversations and utterances per split; deterministic row order
/// train, validation, test.
pub fn split_counts(corpora: &BTreeMap<Split, Corpus>) -> SplitCounts {
    let mut rows = Vec::new();
    for split in [Split::Train, Split::Validation, Split::Test] {
        if let Some(corpus) = corpora.get(&split) {
            rows.push(SplitCountRow {
                split,
                conversations: corpus.conversation_count(),
                utterances: corpus.utterance_count(),
            });
        }
    }
    SplitCounts { rows }
}

impl SplitCounts {
    pub fn render_table(&self) -> String {
        let mut out = String::from("split        conversations  utterances\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{:<12} {:>13}  {:>10}\n",
                row.split.to_string(),
                row.conversations,
                row.utterances
            ));
        }
        out
    }
}

/// Label set shared across splits: the training split's first-seen order.
/// Labels appearing only outside the training split are rejected.
pub fn unified_label_set(
    train: &Corpus,
    others: &[&Corpus],
) -> Result<Vec<String>, CorpusError> {
    let labels = train.label_set()?.to_vec();
    let known: HashSet<&String> = labels.iter().collect();
    for corpus in others {
        for conv in &corpus.conversations {
            for u in &conv.utterances {
                if let Some(e) = &u.emotion {
                    if !known.contains(e) {
                        return Err(CorpusError::LabelOutsideTrain {
                            label: e.clone(),
                            split: corpus.split_tag.to_string(),
                        });
                    }
                }
            }
        }
    }
    Ok(labels)
}
