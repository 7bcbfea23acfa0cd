//! End-to-end model assembly: tokenizer, verbalizer, prompt generator and
//! prediction LM over one parameter store, with the forward passes used by
//! training and inference.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::cloze::{
    assemble_input, build_verbalizer, ClassifyMode, ClozeError, MaskDistribution, MaskedLm,
    MaskedLmConfig, TokenId, TokenPlan, Tokenizer, Verbalizer,
};
use crate::config::{ConfigError, RunConfig, SEMANTIC_SOURCE_PLM};
use crate::corpus::{Conversation, Corpus, CorpusError};
use crate::encoders::{
    extract_conversation_features, CacheError, ConversationFeatures, EncoderError,
    ReferenceBackend, SemanticBackend, SEMANTIC_POOL_LAYERS,
};
use crate::nn::{Binder, ParamStore, Tape, Var};
use crate::promptgen::{PromptBundleVars, PromptError, PromptGenerator, PromptMode};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Cloze(#[from] ClozeError),
    #[error("no features for conversation '{0}'; run the features step or check the cache")]
    MissingFeatures(String),
    #[error("utterance {conversation_id}:{index} carries unknown label '{label}'")]
    UnknownLabel {
        conversation_id: String,
        index: usize,
        label: String,
    },
}

/// Features keyed by conversation id.
pub type FeatureSet = BTreeMap<String, ConversationFeatures>;

/// The assembled CISPER model.
pub struct CisperModel {
    pub config: RunConfig,
    pub label_set: Vec<String>,
    pub tokenizer: Tokenizer,
    pub verbalizer: Verbalizer,
    pub generator: PromptGenerator,
    pub lm: MaskedLm,
    pub params: ParamStore,
}

/// One utterance's training view: its plan and gold word id.
#[derive(Debug)]
pub struct UtteranceTarget {
    pub utterance_index: usize,
    pub plan: TokenPlan,
    pub gold_id: TokenId,
}

impl CisperModel {
    /// Builds the model from configuration plus the training corpus (which
    /// fixes the vocabulary and label set).
    pub fn build(config: &RunConfig, train: &Corpus) -> Result<CisperModel, ModelError> {
        config.validate()?;
        let label_set = train.label_set()?.to_vec();
        Self::build_with_vocab_source(config, label_set, train_texts(train))
    }

    /// Builds from an explicit label set and vocabulary text source (used
    /// when restoring from a checkpoint).
    pub fn build_with_vocab(
        config: &RunConfig,
        label_set: Vec<String>,
        vocab: Vec<String>,
    ) -> Result<CisperModel, ModelError> {
        config.validate()?;
        let pseudo = 2 * (config.n_e + config.n_p);
        let tokenizer = Tokenizer::from_vocab(vocab).with_pseudo_tokens(pseudo);
        Self::assemble(config, label_set, tokenizer)
    }

    fn build_with_vocab_source(
        config: &RunConfig,
        label_set: Vec<String>,
        texts: Vec<String>,
    ) -> Result<CisperModel, ModelError> {
        let mut label_words: Vec<String> = label_set.clone();
        for (label, word) in config.verbalizer_override_map()? {
            if label_set.contains(&label) {
                label_words.push(word);
            }
        }
        let pseudo = 2 * (config.n_e + config.n_p);
        let tokenizer =
            Tokenizer::build(texts, &label_words, config.vocab_size).with_pseudo_tokens(pseudo);
        Self::assemble(config, label_set, tokenizer)
    }

    fn assemble(
        config: &RunConfig,
        label_set: Vec<String>,
        tokenizer: Tokenizer,
    ) -> Result<CisperModel, ModelError> {
        let mut verbalizer =
            build_verbalizer(&label_set, &config.verbalizer_override_map()?, &tokenizer)?;
        if !config.thesaurus_path.is_empty() {
            verbalizer.load_thesaurus(Path::new(&config.thesaurus_path))?;
        }
        let generator = PromptGenerator::new(config.promptgen_config())?;
        let lm = MaskedLm::new(
            MaskedLmConfig {
                d_t: config.d_t,
                layers: config.lm_layers,
                heads: config.lm_heads,
                max_positions: config.max_seq_len,
                seed: config.seed,
            },
            &tokenizer,
        );
        let mut params = ParamStore::new();
        generator.register_params(&mut params);
        lm.register_params(&mut params);
        Ok(CisperModel {
            config: config.clone(),
            label_set,
            tokenizer,
            verbalizer,
            generator,
            lm,
            params,
        })
    }

    /// Whether a named parameter is updated by the optimizer under the
    /// configured mode and tuning flags.
    pub fn is_trainable(&self, name: &str) -> bool {
        Self::is_trainable_under(&self.config, name)
    }

    pub fn is_trainable_under(config: &RunConfig, name: &str) -> bool {
        if MaskedLm::is_lm_param(name) {
            return config.tune_plm;
        }
        match config.mode {
            PromptMode::FixedTemplate => false,
            PromptMode::Random => PromptGenerator::is_random_prompt_param(name),
            _ => PromptGenerator::is_generator_stack_param(name),
        }
    }

    /// Prompt bundles for a conversation on an existing tape; `None` in
    /// fixed-template mode.
    pub fn bundles_for<'t>(
        &self,
        binder: &Binder<'t, '_>,
        features: &ConversationFeatures,
    ) -> Result<Option<Vec<PromptBundleVars<'t>>>, ModelError> {
        if !self.config.mode.uses_bundles() {
            return Ok(None);
        }
        Ok(Some(self.generator.forward_bundles(
            binder,
            features,
            self.config.mode,
        )?))
    }

    /// Plans and gold ids for every labeled utterance of a conversation.
    pub fn targets_for(&self, conversation: &Conversation) -> Result<Vec<UtteranceTarget>, ModelError> {
        let mut out = Vec::new();
        for utterance in &conversation.utterances {
            let Some(label) = &utterance.emotion else { continue };
            let gold_id = self.verbalizer.token_id(label).map_err(|_| ModelError::UnknownLabel {
                conversation_id: utterance.conversation_id.clone(),
                index: utterance.index,
                label: label.clone(),
            })?;
            let plan = self.plan_for(utterance)?;
            out.push(UtteranceTarget {
                utterance_index: utterance.index,
                plan,
                gold_id,
            });
        }
        Ok(out)
    }

    pub fn plan_for(&self, utterance: &crate::corpus::Utterance) -> Result<TokenPlan, ModelError> {
        Ok(assemble_input_with(
            utterance,
            &self.tokenizer,
            AssembleOptions {
                n_e: self.config.n_e,
                n_p: self.config.n_p,
                mode: self.config.mode,
                max_len: self.config.max_seq_len,
                side_halved: self.config.side_halved,
            },
        )?)
    }

    /// Log-probability row (1 x vocab) at the mask for one planned
    /// utterance, with prompt injection when the mode uses bundles.
    pub fn utterance_log_probs<'t>(
        &self,
        binder: &Binder<'t, '_>,
        plan: &TokenPlan,
        bundle: Option<&PromptBundleVars<'t>>,
    ) -> Result<Var<'t>, ModelError> {
        let embedded = self.lm.embed_plan(binder, plan, bundle)?;
        Ok(self
            .lm
            .forward_mask_log_probs(binder, embedded, plan.mask_position))
    }

    /// Inference over one conversation: (utterance index, predicted label)
    /// for every labeled utterance.
    pub fn predict_conversation(
        &self,
        conversation: &Conversation,
        features: &ConversationFeatures,
    ) -> Result<Vec<(usize, String)>, ModelError> {
        let tape = Tape::new();
        let binder = Binder::new(&tape, &self.params);
        let bundles = self.bundles_for(&binder, features)?;
        let mode = if self.config.open_classification {
            ClassifyMode::Open
        } else {
            ClassifyMode::Restricted
        };
        let mut out = Vec::new();
        for target in self.targets_for(conversation)? {
            let bundle = bundles.as_ref().map(|b| &b[target.utterance_index]);
            let log_probs = self.utterance_log_probs(&binder, &target.plan, bundle)?;
            let probs = log_probs.value().data.iter().map(|lp| lp.exp()).collect();
            let dist = MaskDistribution { probs };
            out.push((
                target.utterance_index,
                self.verbalizer.classify(&dist, &self.tokenizer, mode),
            ));
        }
        Ok(out)
    }
}

fn train_texts(corpus: &Corpus) -> Vec<String> {
    corpus
        .conversations
        .iter()
        .flat_map(|c| c.utterances.iter().map(|u| u.text.clone()))
        .collect()
}

/// Semantic backend that pools the prediction model's own encoder layers
/// (shared-weights extraction from a frozen parameter snapshot).
pub struct PlmSemanticBackend<'a> {
    lm: &'a MaskedLm,
    params: &'a ParamStore,
    tokenizer: &'a Tokenizer,
    max_tokens: usize,
}

impl<'a> PlmSemanticBackend<'a> {
    pub fn new(lm: &'a MaskedLm, params: &'a ParamStore, tokenizer: &'a Tokenizer) -> Self {
        PlmSemanticBackend {
            lm,
            params,
            tokenizer,
            max_tokens: lm.cfg.max_positions,
        }
    }
}

impl SemanticBackend for PlmSemanticBackend<'_> {
    fn name(&self) -> &str {
        "plm-shared"
    }

    fn embedding_dim(&self) -> usize {
        self.lm.cfg.d_t
    }

    fn max_tokens(&self) -> usize {
        self.max_tokens
    }

    fn pooled_layer_states(&self, framed_text: &str) -> Result<Vec<Vec<f32>>, String> {
        let inner = framed_text
            .strip_prefix("[CLS] ")
            .and_then(|t| t.strip_suffix(" [SEP]"))
            .unwrap_or(framed_text);
        let mut ids = vec![self.tokenizer.cls_id()];
        ids.extend(self.tokenizer.encode(inner));
        ids.push(self.tokenizer.sep_id());
        let layers = self.lm.encode_layer_states(self.params, &ids);
        // pooled position 0 of the last four stages; shallow stacks repeat
        // their earliest stage
        let mut picked = Vec::with_capacity(SEMANTIC_POOL_LAYERS);
        for k in 0..SEMANTIC_POOL_LAYERS {
            let idx = layers.len().saturating_sub(SEMANTIC_POOL_LAYERS - k);
            let state = &layers[idx.min(layers.len() - 1)];
            picked.push(state.row(0).iter().map(|v| *v as f32).collect());
        }
        Ok(picked)
    }
}

/// Extracts features for every conversation of a corpus with the configured
/// backends.
pub fn extract_features(
    corpus: &Corpus,
    config: &RunConfig,
    model: &CisperModel,
) -> Result<Vec<ConversationFeatures>, ModelError> {
    let commonsense = ReferenceBackend::new(config.d_c, config.seed);
    let mut out = Vec::with_capacity(corpus.conversations.len());
    if config.semantic_source == SEMANTIC_SOURCE_PLM {
        let semantic = PlmSemanticBackend::new(&model.lm, &model.params, &model.tokenizer);
        for conversation in &corpus.conversations {
            out.push(extract_conversation_features(conversation, &semantic, &commonsense)?);
        }
    } else {
        let semantic = ReferenceBackend::new(config.d_u, config.seed.wrapping_add(1));
        for conversation in &corpus.conversations {
            out.push(extract_conversation_features(conversation, &semantic, &commonsense)?);
        }
    }
    Ok(out)
}

/// Builds the feature map for several corpora, from the cache when present
/// or live extraction otherwise.
pub fn features_for_corpora(
    corpora: &[&Corpus],
    config: &RunConfig,
    model: &CisperModel,
) -> Result<FeatureSet, ModelError> {
    let mut set = FeatureSet::new();
    if let Some(cache_dir) = config.cache_dir() {
        if cache_dir.join("manifest.json").exists() {
            let ids: Vec<String> = corpora
                .iter()
                .flat_map(|c| c.conversations.iter().map(|conv| conv.id.clone()))
                .collect();
            for features in crate::encoders::read_feature_cache(&cache_dir, &ids)? {
                set.insert(features.conversation_id.clone(), features);
            }
            return Ok(set);
        }
    }
    for corpus in corpora {
        for features in extract_features(corpus, config, model)? {
            set.insert(features.conversation_id.clone(), features);
        }
    }
    Ok(set)
}
