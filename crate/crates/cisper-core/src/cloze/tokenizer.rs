//! Word-level tokenizer for the desk-scale prediction backend. Lowercases,
//! splits on whitespace and hyphens, and reserves a block of pseudo-token
//! ids after the base vocabulary for the continuous prompt slots.

use std::collections::HashMap;

pub type TokenId = usize;

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
pub const UNK: &str = "[UNK]";

/// Words of the fixed prompt template; always present in the vocabulary.
pub const TEMPLATE_WORDS: [&str; 3] = ["my", "emotion", "is"];

#[derive(Debug, Clone)]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: HashMap<String, TokenId>,
    pseudo_count: usize,
}

/// Splits text into normalized word pieces: lowercase, whitespace- and
/// hyphen-separated, outer punctuation stripped.
pub fn word_pieces(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        for part in raw.split('-') {
            let trimmed: String = part
                .trim_matches(|c: char| !c.is_alphanumeric() && c != '\'')
                .to_lowercase();
            if !trimmed.is_empty() {
                out.push(trimmed);
            }
        }
    }
    out
}

impl Tokenizer {
    /// Builds a vocabulary from corpus texts: specials, the label words, the
    /// template words, then the most frequent corpus words up to `max_size`
    /// total entries (frequency descending, first-seen as tie-break).
    pub fn build(
        texts: impl IntoIterator<Item = String>,
        label_words: &[String],
        max_size: usize,
    ) -> Tokenizer {
        let mut vocab: Vec<String> = vec![
            CLS.to_string(),
            SEP.to_string(),
            MASK.to_string(),
            UNK.to_string(),
        ];
        let mut index: HashMap<String, TokenId> = vocab
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        let push = |vocab: &mut Vec<String>, index: &mut HashMap<String, TokenId>, word: String| {
            if !index.contains_key(&word) {
                index.insert(word.clone(), vocab.len());
                vocab.push(word);
            }
        };
        for label in label_words {
            for piece in word_pieces(label) {
                push(&mut vocab, &mut index, piece);
            }
        }
        for word in TEMPLATE_WORDS {
            push(&mut vocab, &mut index, word.to_string());
        }

        let mut counts: HashMap<String, (usize, usize)> = HashMap::new();
        let mut order = 0usize;
        for text in texts {
            for piece in word_pieces(&text) {
                let entry = counts.entry(piece).or_insert((0, order));
                entry.0 += 1;
                order += 1;
            }
        }
        let mut ranked: Vec<(String, (usize, usize))> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.1 .1.cmp(&b.1 .1)));
        for (word, _) in ranked {
            if vocab.len() >= max_size {
                break;
            }
            push(&mut vocab, &mut index, word);
        }
        Tokenizer {
            vocab,
            index,
            pseudo_count: 0,
        }
    }

    /// Rebuilds a tokenizer from a saved vocabulary list (checkpoint reload).
    pub fn from_vocab(vocab: Vec<String>) -> Tokenizer {
        assert!(vocab.len() >= 4 && vocab[0] == CLS, "vocabulary must start with the specials");
        let index = vocab
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        Tokenizer {
            vocab,
            index,
            pseudo_count: 0,
        }
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    /// Reserves `count` pseudo-token ids appended after the base vocabulary.
    pub fn with_pseudo_tokens(mut self, count: usize) -> Tokenizer {
        self.pseudo_count = count;
        self
    }

    /// Base vocabulary size (the classification space), pseudo ids excluded.
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// Total id space: base vocabulary plus reserved pseudo ids.
    pub fn total_ids(&self) -> usize {
        self.vocab.len() + self.pseudo_count
    }

    pub fn pseudo_count(&self) -> usize {
        self.pseudo_count
    }

    pub fn pseudo_id(&self, slot: usize) -> TokenId {
        assert!(slot < self.pseudo_count, "pseudo slot {slot} not reserved");
        self.vocab.len() + slot
    }

    pub fn cls_id(&self) -> TokenId {
        self.index[CLS]
    }

    pub fn sep_id(&self) -> TokenId {
        self.index[SEP]
    }

    pub fn mask_id(&self) -> TokenId {
        self.index[MASK]
    }

    pub fn unk_id(&self) -> TokenId {
        self.index[UNK]
    }

    pub fn id_of(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn word_of(&self, id: TokenId) -> &str {
        if id < self.vocab.len() {
            &self.vocab[id]
        } else {
            "[PSEUDO]"
        }
    }

    /// Encodes running text; out-of-vocabulary pieces map to `[UNK]`.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        word_pieces(text)
            .into_iter()
            .map(|p| self.index.get(&p).copied().unwrap_or_else(|| self.unk_id()))
            .collect()
    }

    /// Tokenizes one candidate label word into its pieces (for the
    /// single-token verbalizer check).
    pub fn tokenize_word(&self, word: &str) -> Vec<String> {
        word_pieces(word)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builds_specials_labels_then_frequent_words() {
        let texts = vec![
            "the cat sat".to_string(),
            "the cat ran".to_string(),
            "the dog".to_string(),
        ];
        let tok = Tokenizer::build(texts, &["joy".to_string()], 64);
        assert_eq!(tok.id_of(CLS), Some(0));
        assert_eq!(tok.id_of(SEP), Some(1));
        assert_eq!(tok.id_of(MASK), Some(2));
        assert_eq!(tok.id_of(UNK), Some(3));
        assert_eq!(tok.id_of("joy"), Some(4));
        // template words follow labels
        assert_eq!(tok.id_of("my"), Some(5));
        // "the" is the most frequent corpus word
        assert_eq!(tok.id_of("the"), Some(8));
    }

    #[test]
    fn vocab_cap_is_respected() {
        let texts: Vec<String> = (0..100).map(|i| format!("word{i}")).collect();
        let tok = Tokenizer::build(texts, &[], 16);
        assert_eq!(tok.vocab_size(), 16);
    }

    #[test]
    fn encode_maps_oov_to_unk() {
        let tok = Tokenizer::build(vec!["hello world".to_string()], &[], 64);
        let ids = tok.encode("hello unseen");
        assert_eq!(ids[0], tok.id_of("hello").unwrap());
        assert_eq!(ids[1], tok.unk_id());
    }

    #[test]
    fn hyphenated_words_split_to_pieces() {
        let tok = Tokenizer::build(vec![], &[], 64);
        assert_eq!(tok.tokenize_word("power-less-ness").len(), 3);
        assert_eq!(tok.tokenize_word("joy").len(), 1);
    }

    #[test]
    fn punctuation_is_stripped() {
        assert_eq!(word_pieces("Oh my, hi!"), vec!["oh", "my", "hi"]);
        assert_eq!(word_pieces("don't stop"), vec!["don't", "stop"]);
    }

    #[test]
    fn pseudo_ids_follow_base_vocab() {
        let tok = Tokenizer::build(vec!["a b".to_string()], &[], 64).with_pseudo_tokens(4);
        assert_eq!(tok.pseudo_id(0), tok.vocab_size());
        assert_eq!(tok.pseudo_id(3), tok.vocab_size() + 3);
        assert_eq!(tok.total_ids(), tok.vocab_size() + 4);
    }
}
