//! Synthetic desk-scale corpora for tests and demos.
//!
//! The toy task plants a theme in each conversation's carrier utterances and
//! labels every utterance with the theme's emotion. Probe utterances repeat
//! the exact same text in every conversation, so they are only solvable from
//! conversation context; a prompt that ignores the context cannot separate
//! them.

use std::collections::BTreeMap;

use crate::config::RunConfig;
use crate::corpus::{Corpus, Split, Utterance};
use crate::model::{features_for_corpora, CisperModel, FeatureSet, ModelError};
use crate::nn::keyed_rng;
use rand::Rng;

const THEMES: [(&str, &str, [&str; 6]); 3] = [
    (
        "garden",
        "upbeat",
        [
            "the garden blooms with roses and tulips",
            "sunny flowerbeds smell wonderful today",
            "petals drift over the bright lawn",
            "bees hum around the blossom hedge",
            "fresh green shoots climb the trellis",
            "the orchard glows in warm light",
        ],
    ),
    (
        "winter",
        "grim",
        [
            "the winter storm rattles frozen windows",
            "grey sleet batters the icy street",
            "cold drafts creep under the door",
            "snow buries the stalled traffic again",
            "the blizzard cancels every plan tonight",
            "frost cracks the brittle pipes",
        ],
    ),
    (
        "library",
        "calm",
        [
            "the library reading room stays hushed",
            "quiet shelves hold dusty old volumes",
            "students whisper near the archive desk",
            "pages turn softly under lamplight",
            "the catalog drawer slides without sound",
            "slow afternoons pass between bookcases",
        ],
    ),
];

/// Identical in every conversation; the emotion depends on the theme.
const PROBES: [&str; 2] = ["well okay then", "right you are"];

/// Corpora plus a run configuration tuned for single-core training of the
/// from-scratch toy model.
pub struct ToyFixture {
    pub corpora: BTreeMap<Split, Corpus>,
    pub config: RunConfig,
}

impl ToyFixture {
    pub fn train(&self) -> &Corpus {
        &self.corpora[&Split::Train]
    }

    pub fn validation(&self) -> &Corpus {
        &self.corpora[&Split::Validation]
    }

    pub fn test(&self) -> &Corpus {
        &self.corpora[&Split::Test]
    }

    pub fn build_model(&self) -> Result<CisperModel, ModelError> {
        CisperModel::build(&self.config, self.train())
    }

    pub fn features(&self, model: &CisperModel) -> Result<FeatureSet, ModelError> {
        features_for_corpora(
            &[self.train(), self.validation(), self.test()],
            &self.config,
            model,
        )
    }
}

fn make_conversation(id: &str, theme_index: usize, rotation: usize) -> Vec<Utterance> {
    let (_, label, pool) = THEMES[theme_index];
    let carriers: Vec<&str> = (0..3).map(|k| pool[(rotation + 2 * k) % pool.len()]).collect();
    let texts = [carriers[0], PROBES[0], carriers[1], PROBES[1], carriers[2]];
    texts
        .iter()
        .enumerate()
        .map(|(index, text)| Utterance {
            conversation_id: id.to_string(),
            index,
            speaker: if index % 2 == 0 { "a" } else { "b" }.to_string(),
            text: text.to_string(),
            emotion: Some(label.to_string()),
        })
        .collect()
}

fn make_split(split: Split, count: usize, rotation_offset: usize, seed: u64) -> Corpus {
    let mut rng = keyed_rng(seed, &format!("fixture-{split}"));
    let mut utterances = Vec::new();
    for i in 0..count {
        let theme = i % THEMES.len();
        let rotation = rotation_offset + i / THEMES.len() + rng.gen_range(0..2);
        let id = format!("{split}-{i}");
        utterances.extend(make_conversation(&id, theme, rotation));
    }
    Corpus::from_utterances(utterances, split).expect("fixture corpus is well formed")
}

/// The 8-conversation, 3-label toy fixture with its tuned run configuration.
pub fn toy_fixture(seed: u64) -> ToyFixture {
    let mut corpora = BTreeMap::new();
    corpora.insert(Split::Train, make_split(Split::Train, 8, 0, seed));
    corpora.insert(Split::Validation, make_split(Split::Validation, 3, 3, seed));
    corpora.insert(Split::Test, make_split(Split::Test, 3, 4, seed));

    let config = RunConfig {
        // the toy model trains from scratch, so the step size suits random
        // initialization rather than pretrained fine-tuning
        learning_rate: 5e-3,
        weight_decay: 1e-2,
        batch_size: 20,
        epochs: 200,
        early_stop_patience: 0,
        seed,
        d_u: 16,
        d_c: 16,
        d_t: 16,
        n_e: 1,
        n_p: 1,
        encoder_layers: 1,
        encoder_heads: 2,
        lm_layers: 2,
        lm_heads: 2,
        vocab_size: 64,
        max_seq_len: 32,
        max_conversation_len: 8,
        ..RunConfig::default()
    };
    ToyFixture { corpora, config }
}
