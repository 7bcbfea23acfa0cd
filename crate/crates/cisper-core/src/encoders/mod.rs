//! Per-utterance feature extraction: semantic embeddings pooled from a
//! masked-LM encoder and nine-relation commonsense embeddings, both behind
//! pluggable backends so desk-scale runs never need pretrained weights.

mod cache;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{Conversation, Utterance};
use crate::nn::{keyed_rng, next_standard_normal};

pub use cache::{read_feature_cache, write_feature_cache, CacheError, CacheManifest};

/// Number of encoder layers pooled for the semantic embedding.
pub const SEMANTIC_POOL_LAYERS: usize = 4;

/// Number of commonsense relation types.
pub const RELATION_COUNT: usize = 9;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("semantic backend '{backend}' failed on utterance {conversation_id}:{index}: {reason}")]
    SemanticBackend {
        backend: String,
        conversation_id: String,
        index: usize,
        reason: String,
    },
    #[error("commonsense backend '{backend}' failed on utterance {conversation_id}:{index}: {reason}")]
    CommonsenseBackend {
        backend: String,
        conversation_id: String,
        index: usize,
        reason: String,
    },
    #[error("utterance {conversation_id}:{index} has empty text")]
    EmptyText {
        conversation_id: String,
        index: usize,
    },
    #[error("unknown commonsense relation '{0}'")]
    UnknownRelation(String),
}

/// The nine inferential commonsense relations, in table order: six about the
/// speaker's state, three about the listener's.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Relation {
    XIntent,
    XAttr,
    XNeed,
    XWant,
    XEffect,
    XReact,
    OWant,
    OEffect,
    OReact,
}

impl Relation {
    pub const ALL: [Relation; RELATION_COUNT] = [
        Relation::XIntent,
        Relation::XAttr,
        Relation::XNeed,
        Relation::XWant,
        Relation::XEffect,
        Relation::XReact,
        Relation::OWant,
        Relation::OEffect,
        Relation::OReact,
    ];

    /// Relations describing the speaker's state (r1..r6).
    pub const SPEAKER: [Relation; 6] = [
        Relation::XIntent,
        Relation::XAttr,
        Relation::XNeed,
        Relation::XWant,
        Relation::XEffect,
        Relation::XReact,
    ];

    /// Relations describing the listener's state (r7..r9).
    pub const LISTENER: [Relation; 3] = [Relation::OWant, Relation::OEffect, Relation::OReact];

    pub fn token(&self) -> &'static str {
        match self {
            Relation::XIntent => "xIntent",
            Relation::XAttr => "xAttr",
            Relation::XNeed => "xNeed",
            Relation::XWant => "xWant",
            Relation::XEffect => "xEffect",
            Relation::XReact => "xReact",
            Relation::OWant => "oWant",
            Relation::OEffect => "oEffect",
            Relation::OReact => "oReact",
        }
    }

    /// 0-based position within [`Relation::ALL`].
    pub fn index(&self) -> usize {
        Relation::ALL.iter().position(|r| r == self).unwrap()
    }

    pub fn parse(token: &str) -> Result<Relation, EncoderError> {
        Relation::ALL
            .iter()
            .copied()
            .find(|r| r.token() == token)
            .ok_or_else(|| EncoderError::UnknownRelation(token.to_string()))
    }
}

/// Produces pooled hidden states for an utterance. Implementations must be
/// deterministic in inference mode: the same text yields the same vectors.
pub trait SemanticBackend {
    fn name(&self) -> &str;

    fn embedding_dim(&self) -> usize;

    /// Maximum input length in tokens, including the two framing specials.
    fn max_tokens(&self) -> usize;

    /// Pooled-token hidden state of each of the last four encoder layers for
    /// the framed input `[CLS] text [SEP]`. Must return exactly four vectors
    /// of `embedding_dim` elements.
    fn pooled_layer_states(&self, framed_text: &str) -> Result<Vec<Vec<f32>>, String>;
}

/// Produces a last-layer hidden state for (utterance tokens, relation token).
pub trait CommonsenseBackend {
    fn name(&self) -> &str;

    fn embedding_dim(&self) -> usize;

    fn encode(&self, text: &str, relation: Relation) -> Result<Vec<f32>, String>;
}

/// Whitespace-token truncation to the backend budget, reserving two
/// positions for the framing specials.
fn truncate_text(text: &str, max_tokens: usize, what: &str, utterance: &Utterance) -> String {
    let budget = max_tokens.saturating_sub(2);
    let tokens: Vec<&str> = text.split_whitespace().collect();
    if tokens.len() <= budget {
        return text.to_string();
    }
    log::warn!(
        "truncating utterance {}:{} from {} to {} tokens for {}",
        utterance.conversation_id,
        utterance.index,
        tokens.len(),
        budget,
        what
    );
    tokens[..budget].join(" ")
}

/// Semantic embedding of one utterance: the arithmetic mean of the pooled
/// hidden states from the last four encoder layers.
pub fn encode_utterance_semantics(
    utterance: &Utterance,
    backend: &dyn SemanticBackend,
) -> Result<Vec<f32>, EncoderError> {
    if utterance.text.trim().is_empty() {
        return Err(EncoderError::EmptyText {
            conversation_id: utterance.conversation_id.clone(),
            index: utterance.index,
        });
    }
    let text = truncate_text(&utterance.text, backend.max_tokens(), "semantic backend", utterance);
    let framed = format!("[CLS] {text} [SEP]");
    let layers = backend
        .pooled_layer_states(&framed)
        .map_err(|reason| EncoderError::SemanticBackend {
            backend: backend.name().to_string(),
            conversation_id: utterance.conversation_id.clone(),
            index: utterance.index,
            reason,
        })?;
    assert_eq!(
        layers.len(),
        SEMANTIC_POOL_LAYERS,
        "semantic backend must return {SEMANTIC_POOL_LAYERS} layer vectors"
    );
    let dim = backend.embedding_dim();
    let mut mean = vec![0.0f32; dim];
    for layer in &layers {
        assert_eq!(layer.len(), dim, "layer vector dimension mismatch");
        for (m, v) in mean.iter_mut().zip(layer.iter()) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= SEMANTIC_POOL_LAYERS as f32;
    }
    Ok(mean)
}

/// Commonsense embedding for (utterance, relation): the backend's last-layer
/// hidden state for the token sequence followed by the relation token.
pub fn encode_commonsense(
    utterance: &Utterance,
    relation: Relation,
    backend: &dyn CommonsenseBackend,
) -> Result<Vec<f32>, EncoderError> {
    let out = backend
        .encode(&utterance.text, relation)
        .map_err(|reason| EncoderError::CommonsenseBackend {
            backend: backend.name().to_string(),
            conversation_id: utterance.conversation_id.clone(),
            index: utterance.index,
            reason,
        })?;
    assert_eq!(out.len(), backend.embedding_dim(), "commonsense dim mismatch");
    Ok(out)
}

/// Per-conversation feature block: the L x d_u semantic matrix and the
/// L x 9 x d_c commonsense tensor, both row-major f32.
#[derive(Debug, Clone, PartialEq)]
pub struct ConversationFeatures {
    pub conversation_id: String,
    pub len: usize,
    pub d_u: usize,
    pub d_c: usize,
    /// L * d_u values, utterance-major.
    pub x: Vec<f32>,
    /// L * 9 * d_c values, utterance-major then relation-major.
    pub c: Vec<f32>,
}

impl ConversationFeatures {
    pub fn x_row(&self, t: usize) -> &[f32] {
        &self.x[t * self.d_u..(t + 1) * self.d_u]
    }

    pub fn c_slice(&self, t: usize, relation_index: usize) -> &[f32] {
        let offset = (t * RELATION_COUNT + relation_index) * self.d_c;
        &self.c[offset..offset + self.d_c]
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().all(|v| v.is_finite()) && self.c.iter().all(|v| v.is_finite())
    }
}

/// Extracts the full feature block for one conversation.
pub fn extract_conversation_features(
    conversation: &Conversation,
    semantic: &dyn SemanticBackend,
    commonsense: &dyn CommonsenseBackend,
) -> Result<ConversationFeatures, EncoderError> {
    let d_u = semantic.embedding_dim();
    let d_c = commonsense.embedding_dim();
    let len = conversation.len();
    let mut x = Vec::with_capacity(len * d_u);
    let mut c = Vec::with_capacity(len * RELATION_COUNT * d_c);
    for utterance in &conversation.utterances {
        x.extend_from_slice(&encode_utterance_semantics(utterance, semantic)?);
        for relation in Relation::ALL {
            c.extend_from_slice(&encode_commonsense(utterance, relation, commonsense)?);
        }
    }
    Ok(ConversationFeatures {
        conversation_id: conversation.id.clone(),
        len,
        d_u,
        d_c,
        x,
        c,
    })
}

/// Deterministic stand-in for the pretrained backends: every output is a
/// unit-normalized pseudo-random vector keyed by a stable hash of
/// (seed, input string). Identical inputs give identical vectors on any
/// platform.
#[derive(Debug, Clone)]
pub struct ReferenceBackend {
    dim: usize,
    seed: u64,
    max_tokens: usize,
}

impl ReferenceBackend {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim >= 1, "embedding dim must be at least 1");
        ReferenceBackend {
            dim,
            seed,
            max_tokens: 512,
        }
    }

    pub fn with_max_tokens(mut self, max_tokens: usize) -> Self {
        self.max_tokens = max_tokens;
        self
    }

    /// Unit-normalized vector keyed by (seed, key).
    pub fn unit_vector(&self, key: &str) -> Vec<f32> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(key.as_bytes());
        let digest = hasher.finalize();
        let hashed_key = format!("ref:{:x}", digest);
        let mut rng = keyed_rng(self.seed, &hashed_key);
        let mut v: Vec<f32> = (0..self.dim)
            .map(|_| next_standard_normal(&mut rng) as f32)
            .collect();
        let norm = v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
        if norm < 1e-12 {
            v[0] = 1.0;
        } else {
            for x in v.iter_mut() {
                *x = (*x as f64 / norm) as f32;
            }
        }
        v
    }
}

impl SemanticBackend for ReferenceBackend {
    fn name(&self) -> &str {
        "reference-semantic"
    }

    fn embedding_dim(&self) -> usize {
        self.dim
    }

    fn max_tokens(&self) -> usize {
        self.max_tokens
    }

    fn pooled_layer_states(&self, framed_text: &str) -> Result<Vec<Vec<f32>>, String> {
        Ok((0..SEMANTIC_POOL_LAYERS)
            .map(|layer| self.unit_vector(&format!("sem\u{1}{layer}\u{1}{framed_text}")))
            .collect())
    }
}

impl CommonsenseBackend for ReferenceBackend {
    fn name(&self) -> &str {
        "reference-commonsense"
    }

    fn embedding_dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str, relation: Relation) -> Result<Vec<f32>, String> {
        Ok(self.unit_vector(&format!("cs\u{1}{text}\u{1}{}", relation.token())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Utterance;

    fn utt(text: &str) -> Utterance {
        Utterance {
            conversation_id: "c1".to_string(),
            index: 0,
            speaker: "s".to_string(),
            text: text.to_string(),
            emotion: None,
        }
    }

    /// Backend whose four layer vectors are fixed multiples of e1.
    struct LayerFixture {
        dim: usize,
        scale: f32,
    }

    impl SemanticBackend for LayerFixture {
        fn name(&self) -> &str {
            "layer-fixture"
        }
        fn embedding_dim(&self) -> usize {
            self.dim
        }
        fn max_tokens(&self) -> usize {
            512
        }
        fn pooled_layer_states(&self, _framed: &str) -> Result<Vec<Vec<f32>>, String> {
            Ok((1..=4)
                .map(|k| {
                    let mut v = vec![0.0; self.dim];
                    v[0] = k as f32 * self.scale;
                    v
                })
                .collect())
        }
    }

    #[test]
    fn semantic_mean_of_four_layers() {
        let backend = LayerFixture { dim: 4, scale: 1.0 };
        let out = encode_utterance_semantics(&utt("hello"), &backend).unwrap();
        assert_eq!(out, vec![2.5, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn semantic_mean_is_linear_in_layer_scale() {
        let alpha = 3.25f32;
        let base = encode_utterance_semantics(&utt("hello"), &LayerFixture { dim: 4, scale: 1.0 })
            .unwrap();
        let scaled =
            encode_utterance_semantics(&utt("hello"), &LayerFixture { dim: 4, scale: alpha })
                .unwrap();
        for (b, s) in base.iter().zip(scaled.iter()) {
            assert!((s - alpha * b).abs() < 1e-6);
        }
    }

    #[test]
    fn reference_backend_is_deterministic() {
        let a = ReferenceBackend::new(16, 7);
        let b = ReferenceBackend::new(16, 7);
        let u = utt("same text");
        assert_eq!(
            encode_utterance_semantics(&u, &a).unwrap(),
            encode_utterance_semantics(&u, &b).unwrap()
        );
        assert_eq!(
            encode_commonsense(&u, Relation::XReact, &a).unwrap(),
            encode_commonsense(&u, Relation::XReact, &b).unwrap()
        );
    }

    #[test]
    fn reference_backend_seed_changes_output() {
        let a = ReferenceBackend::new(16, 7);
        let b = ReferenceBackend::new(16, 8);
        let u = utt("same text");
        assert_ne!(
            encode_utterance_semantics(&u, &a).unwrap(),
            encode_utterance_semantics(&u, &b).unwrap()
        );
    }

    #[test]
    fn reference_vectors_are_unit_norm() {
        let backend = ReferenceBackend::new(32, 3);
        let v = backend.unit_vector("anything");
        let norm: f64 = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn relations_give_distinct_vectors() {
        let backend = ReferenceBackend::new(16, 5);
        let u = utt("I slammed the door");
        let x = encode_commonsense(&u, Relation::XReact, &backend).unwrap();
        let o = encode_commonsense(&u, Relation::OReact, &backend).unwrap();
        assert_ne!(x, o);
    }

    #[test]
    fn relation_table_order_and_parse() {
        let tokens: Vec<&str> = Relation::ALL.iter().map(|r| r.token()).collect();
        assert_eq!(
            tokens,
            vec!["xIntent", "xAttr", "xNeed", "xWant", "xEffect", "xReact", "oWant", "oEffect", "oReact"]
        );
        assert_eq!(Relation::parse("oWant").unwrap(), Relation::OWant);
        assert!(matches!(
            Relation::parse("xBogus"),
            Err(EncoderError::UnknownRelation(_))
        ));
    }

    #[test]
    fn conversation_features_match_per_utterance_loop() {
        let conversation = crate::corpus::Conversation {
            id: "c1".to_string(),
            utterances: (0..3)
                .map(|i| Utterance {
                    conversation_id: "c1".to_string(),
                    index: i,
                    speaker: "s".to_string(),
                    text: format!("utterance number {i}"),
                    emotion: None,
                })
                .collect(),
        };
        let sem = ReferenceBackend::new(8, 11);
        let cs = ReferenceBackend::new(4, 13);
        let features = extract_conversation_features(&conversation, &sem, &cs).unwrap();
        assert_eq!(features.len, 3);
        assert_eq!(features.x.len(), 3 * 8);
        assert_eq!(features.c.len(), 3 * 9 * 4);
        // oracle: unbatched per-utterance, per-relation loop
        for (t, u) in conversation.utterances.iter().enumerate() {
            let expected_x = encode_utterance_semantics(u, &sem).unwrap();
            assert_eq!(features.x_row(t), expected_x.as_slice());
            for relation in Relation::ALL {
                let expected_c = encode_commonsense(u, relation, &cs).unwrap();
                assert_eq!(features.c_slice(t, relation.index()), expected_c.as_slice());
            }
        }
    }

    #[test]
    fn truncation_keeps_going() {
        let backend = ReferenceBackend::new(8, 1).with_max_tokens(6);
        let long = utt("one two three four five six seven eight nine ten");
        let out = encode_utterance_semantics(&long, &backend).unwrap();
        assert_eq!(out.len(), 8);
        // truncated text gives the same embedding as the explicit prefix
        let short = utt("one two three four");
        assert_eq!(out, encode_utterance_semantics(&short, &backend).unwrap());
    }
}
