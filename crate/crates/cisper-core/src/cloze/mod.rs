//! Cloze-style emotion prediction: symmetric pseudo-token input assembly,
//! prompt-embedding injection into the masked-LM stream, and mapping of the
//! masked-position distribution back to an emotion category.

mod lm;
mod tokenizer;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use thiserror::Error;

use crate::corpus::Utterance;
use crate::promptgen::PromptMode;

pub use lm::{
    inject_embeddings, lift_bundle, predict_mask_distribution, MaskedLm, MaskedLmConfig,
};
pub use tokenizer::{word_pieces, TokenId, Tokenizer, CLS, MASK, SEP, TEMPLATE_WORDS, UNK};

#[derive(Debug, Error)]
pub enum ClozeError {
    #[error("verbalizer construction failed: {issues:?}; supply word_overrides mapping each label to a single in-vocabulary word")]
    VerbalizerConstruction { issues: Vec<String> },
    #[error("thesaurus entry '{word}' maps to '{category}' which is not in the label set")]
    ThesaurusUnknownCategory { word: String, category: String },
    #[error("thesaurus line {line} is malformed (expected 'word<TAB>category'): {content}")]
    ThesaurusMalformed { line: usize, content: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("utterance {conversation_id}:{index} tokenizes to zero pieces")]
    EmptyUtterance {
        conversation_id: String,
        index: usize,
    },
    #[error("input too long: {needed} non-word positions alone exceed the backend maximum {max}")]
    InputTooLong { needed: usize, max: usize },
    #[error("tokenizer reserves {reserved} pseudo ids but the plan needs {needed}")]
    PseudoBudget { reserved: usize, needed: usize },
    #[error("injection mismatch at position {position}: plan expects {group} vector {index} but the bundle group has {available}")]
    InjectionMismatch {
        position: usize,
        group: PromptGroup,
        index: usize,
        available: usize,
    },
    #[error("unknown emotion category '{0}'")]
    UnknownCategory(String),
}

/// Which prompt group a pseudo slot belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptGroup {
    ELeft,
    PLeft,
    PRight,
    ERight,
}

impl std::fmt::Display for PromptGroup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            PromptGroup::ELeft => "E_l",
            PromptGroup::PLeft => "P_l",
            PromptGroup::PRight => "P_r",
            PromptGroup::ERight => "E_r",
        };
        f.write_str(s)
    }
}

/// Role of one input position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenRole {
    Cls,
    Sep,
    Mask,
    Word,
    Pseudo(PromptGroup, usize),
}

/// A fully planned masked-LM input: token ids with role tags, the mask
/// position and the pseudo-slot layout.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenPlan {
    pub tokens: Vec<(TokenId, TokenRole)>,
    pub mask_position: usize,
    pub n_e: usize,
    pub n_p: usize,
}

impl TokenPlan {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn ids(&self) -> Vec<TokenId> {
        self.tokens.iter().map(|(id, _)| *id).collect()
    }

    pub fn roles(&self) -> Vec<TokenRole> {
        self.tokens.iter().map(|(_, role)| *role).collect()
    }

    /// Positions carrying prompt embeddings, with their group and in-group
    /// index.
    pub fn pseudo_slots(&self) -> impl Iterator<Item = (usize, PromptGroup, usize)> + '_ {
        self.tokens.iter().enumerate().filter_map(|(pos, (_, role))| match role {
            TokenRole::Pseudo(group, index) => Some((pos, *group, *index)),
            _ => None,
        })
    }

    pub fn word_count(&self) -> usize {
        self.tokens
            .iter()
            .filter(|(_, role)| *role == TokenRole::Word)
            .count()
    }
}

/// Options for [`assemble_input_with`].
#[derive(Debug, Clone, Copy)]
pub struct AssembleOptions {
    pub n_e: usize,
    pub n_p: usize,
    pub mode: PromptMode,
    pub max_len: usize,
    /// Alternative one-sided behavior: place only that side's groups
    /// (N_e + N_p pseudo tokens) instead of relocating all 2(N_e + N_p).
    pub side_halved: bool,
}

/// Assembles the masked-LM input for one utterance with default (relocating)
/// one-sided behavior.
pub fn assemble_input(
    utterance: &Utterance,
    tokenizer: &Tokenizer,
    n_e: usize,
    n_p: usize,
    mode: PromptMode,
    max_len: usize,
) -> Result<TokenPlan, ClozeError> {
    assemble_input_with(
        utterance,
        tokenizer,
        AssembleOptions {
            n_e,
            n_p,
            mode,
            max_len,
            side_halved: false,
        },
    )
}

/// Assembles the masked-LM input for one utterance.
///
/// Symmetric order: `[CLS][E_l][P_l][MASK][words][P_r][E_r][SEP]`. The left
/// and right variants move all pseudo tokens to one side (or only that
/// side's groups under `side_halved`), keeping the mask directly before the
/// word segment. The fixed-template baseline appends `my emotion is [MASK]`
/// after the words and carries no pseudo tokens.
pub fn assemble_input_with(
    utterance: &Utterance,
    tokenizer: &Tokenizer,
    options: AssembleOptions,
) -> Result<TokenPlan, ClozeError> {
    let AssembleOptions {
        n_e,
        n_p,
        mode,
        max_len,
        side_halved,
    } = options;
    let halved = side_halved && matches!(mode, PromptMode::Left | PromptMode::Right);
    let mut words = tokenizer.encode(&utterance.text);
    if words.is_empty() {
        return Err(ClozeError::EmptyUtterance {
            conversation_id: utterance.conversation_id.clone(),
            index: utterance.index,
        });
    }
    let pseudo_needed = if !mode.uses_bundles() {
        0
    } else if halved {
        n_e + n_p
    } else {
        2 * (n_e + n_p)
    };
    let overhead = if mode == PromptMode::FixedTemplate {
        // CLS + template + MASK + SEP
        3 + TEMPLATE_WORDS.len()
    } else {
        pseudo_needed + 3
    };
    if overhead >= max_len {
        return Err(ClozeError::InputTooLong {
            needed: overhead,
            max: max_len,
        });
    }
    // slot ids are assigned by group, so even half-count placement can
    // reference the top of the reserved range
    let reserve_needed = if mode.uses_bundles() { 2 * (n_e + n_p) } else { 0 };
    if tokenizer.pseudo_count() < reserve_needed {
        return Err(ClozeError::PseudoBudget {
            reserved: tokenizer.pseudo_count(),
            needed: reserve_needed,
        });
    }
    let budget = max_len - overhead;
    if words.len() > budget {
        log::warn!(
            "truncating utterance {}:{} word segment from {} to {budget} tokens",
            utterance.conversation_id,
            utterance.index,
            words.len()
        );
        words.truncate(budget);
    }

    let mut tokens: Vec<(TokenId, TokenRole)> = Vec::with_capacity(words.len() + overhead);
    tokens.push((tokenizer.cls_id(), TokenRole::Cls));

    // pseudo slot ids follow group order e_l, p_l, p_r, e_r regardless of
    // where the groups are placed
    let group_slots = |group: PromptGroup| -> Vec<(TokenId, TokenRole)> {
        let (base, count) = match group {
            PromptGroup::ELeft => (0, n_e),
            PromptGroup::PLeft => (n_e, n_p),
            PromptGroup::PRight => (n_e + n_p, n_p),
            PromptGroup::ERight => (n_e + 2 * n_p, n_e),
        };
        (0..count)
            .map(|k| (tokenizer.pseudo_id(base + k), TokenRole::Pseudo(group, k)))
            .collect()
    };

    match mode {
        PromptMode::FixedTemplate => {
            for id in &words {
                tokens.push((*id, TokenRole::Word));
            }
            for word in TEMPLATE_WORDS {
                let id = tokenizer
                    .id_of(word)
                    .expect("template words are always in the vocabulary");
                tokens.push((id, TokenRole::Word));
            }
            tokens.push((tokenizer.mask_id(), TokenRole::Mask));
        }
        PromptMode::Left => {
            let groups: &[PromptGroup] = if halved {
                &[PromptGroup::ELeft, PromptGroup::PLeft]
            } else {
                &[PromptGroup::ELeft, PromptGroup::PLeft, PromptGroup::PRight, PromptGroup::ERight]
            };
            for group in groups {
                tokens.extend(group_slots(*group));
            }
            tokens.push((tokenizer.mask_id(), TokenRole::Mask));
            for id in &words {
                tokens.push((*id, TokenRole::Word));
            }
        }
        PromptMode::Right => {
            tokens.push((tokenizer.mask_id(), TokenRole::Mask));
            for id in &words {
                tokens.push((*id, TokenRole::Word));
            }
            let groups: &[PromptGroup] = if halved {
                &[PromptGroup::PRight, PromptGroup::ERight]
            } else {
                &[PromptGroup::ELeft, PromptGroup::PLeft, PromptGroup::PRight, PromptGroup::ERight]
            };
            for group in groups {
                tokens.extend(group_slots(*group));
            }
        }
        _ => {
            tokens.extend(group_slots(PromptGroup::ELeft));
            tokens.extend(group_slots(PromptGroup::PLeft));
            tokens.push((tokenizer.mask_id(), TokenRole::Mask));
            for id in &words {
                tokens.push((*id, TokenRole::Word));
            }
            tokens.extend(group_slots(PromptGroup::PRight));
            tokens.extend(group_slots(PromptGroup::ERight));
        }
    }
    tokens.push((tokenizer.sep_id(), TokenRole::Sep));

    let mask_position = tokens
        .iter()
        .position(|(_, role)| *role == TokenRole::Mask)
        .expect("every plan contains one mask");
    Ok(TokenPlan {
        tokens,
        mask_position,
        n_e,
        n_p,
    })
}

/// Probability distribution over the base vocabulary at the mask position.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskDistribution {
    pub probs: Vec<f64>,
}

impl MaskDistribution {
    pub fn argmax(&self) -> TokenId {
        self.probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap()
    }
}

/// Classification decoding mode: argmax over the label words only, or over
/// the full vocabulary with a thesaurus lookup and restricted fallback.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassifyMode {
    Restricted,
    Open,
}

/// Bidirectional mapping between emotion categories and single-token label
/// words, with an optional synonym thesaurus for open decoding.
#[derive(Debug, Clone)]
pub struct Verbalizer {
    labels: Vec<String>,
    label_words: BTreeMap<String, String>,
    token_ids: BTreeMap<String, TokenId>,
    id_to_label: HashMap<TokenId, String>,
    thesaurus: BTreeMap<String, String>,
}

/// Builds a verbalizer for `label_set`. The canonical word defaults to the
/// category name itself; `word_overrides` replaces individual defaults. Each
/// canonical word must tokenize to exactly one in-vocabulary piece.
pub fn build_verbalizer(
    label_set: &[String],
    word_overrides: &BTreeMap<String, String>,
    tokenizer: &Tokenizer,
) -> Result<Verbalizer, ClozeError> {
    assert!(!label_set.is_empty(), "label set must be non-empty");
    let mut issues = Vec::new();
    let mut label_words = BTreeMap::new();
    let mut token_ids = BTreeMap::new();
    let mut id_to_label = HashMap::new();
    for label in label_set {
        let word = word_overrides.get(label).unwrap_or(label).to_lowercase();
        let pieces = tokenizer.tokenize_word(&word);
        if pieces.len() != 1 {
            issues.push(format!(
                "label '{label}': word '{word}' tokenizes to {} pieces",
                pieces.len()
            ));
            continue;
        }
        let piece = &pieces[0];
        let id = match tokenizer.id_of(piece) {
            Some(id) if id != tokenizer.unk_id() => id,
            _ => {
                issues.push(format!("label '{label}': word '{word}' is not in the vocabulary"));
                continue;
            }
        };
        if let Some(previous) = id_to_label.insert(id, label.clone()) {
            issues.push(format!(
                "labels '{previous}' and '{label}' share the canonical word '{word}'"
            ));
            continue;
        }
        label_words.insert(label.clone(), word.clone());
        token_ids.insert(label.clone(), id);
    }
    if !issues.is_empty() {
        return Err(ClozeError::VerbalizerConstruction { issues });
    }
    Ok(Verbalizer {
        labels: label_set.to_vec(),
        label_words,
        token_ids,
        id_to_label,
        thesaurus: BTreeMap::new(),
    })
}

impl Verbalizer {
    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label_word(&self, label: &str) -> Option<&str> {
        self.label_words.get(label).map(String::as_str)
    }

    /// Vocabulary id of a category's canonical word.
    pub fn token_id(&self, label: &str) -> Result<TokenId, ClozeError> {
        self.token_ids
            .get(label)
            .copied()
            .ok_or_else(|| ClozeError::UnknownCategory(label.to_string()))
    }

    pub fn thesaurus(&self) -> &BTreeMap<String, String> {
        &self.thesaurus
    }

    /// Installs synonym entries (word -> category); categories must belong
    /// to the label set.
    pub fn set_thesaurus(&mut self, entries: BTreeMap<String, String>) -> Result<(), ClozeError> {
        for (word, category) in &entries {
            if !self.labels.contains(category) {
                return Err(ClozeError::ThesaurusUnknownCategory {
                    word: word.clone(),
                    category: category.clone(),
                });
            }
        }
        self.thesaurus = entries;
        Ok(())
    }

    /// Loads a `word<TAB>category` thesaurus file.
    pub fn load_thesaurus(&mut self, path: &Path) -> Result<(), ClozeError> {
        let content = std::fs::read_to_string(path).map_err(|source| ClozeError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut entries = BTreeMap::new();
        for (i, line) in content.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.splitn(2, '\t');
            let (word, category) = match (parts.next(), parts.next()) {
                (Some(w), Some(c)) if !w.trim().is_empty() && !c.trim().is_empty() => {
                    (w.trim().to_lowercase(), c.trim().to_lowercase())
                }
                _ => {
                    return Err(ClozeError::ThesaurusMalformed {
                        line: i + 1,
                        content: line.to_string(),
                    })
                }
            };
            entries.insert(word, category);
        }
        self.set_thesaurus(entries)
    }

    /// Argmax over the canonical label-word ids, mapped back to a category.
    /// Ties break toward the earlier label in label-set order.
    fn classify_restricted(&self, dist: &MaskDistribution) -> String {
        let mut best: Option<(&str, f64)> = None;
        for label in &self.labels {
            let id = self.token_ids[label];
            let p = dist.probs[id];
            if best.map_or(true, |(_, bp)| p > bp) {
                best = Some((label, p));
            }
        }
        best.expect("label set is non-empty").0.to_string()
    }

    /// Maps the masked-position distribution to an emotion category.
    pub fn classify(
        &self,
        dist: &MaskDistribution,
        tokenizer: &Tokenizer,
        mode: ClassifyMode,
    ) -> String {
        match mode {
            ClassifyMode::Restricted => self.classify_restricted(dist),
            ClassifyMode::Open => {
                let top = dist.argmax();
                if let Some(label) = self.id_to_label.get(&top) {
                    return label.clone();
                }
                let word = tokenizer.word_of(top);
                if let Some(category) = self.thesaurus.get(word) {
                    return category.clone();
                }
                self.classify_restricted(dist)
            }
        }
    }
}
