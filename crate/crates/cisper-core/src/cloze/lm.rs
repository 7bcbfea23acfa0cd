//! Desk-scale prediction backend: a small Transformer masked LM whose input
//! embeddings can be overridden at pseudo-token positions. The forward pass
//! runs on the autodiff tape so both prompt-only and prompt+LM tuning work.

use super::{ClozeError, MaskDistribution, TokenPlan, TokenRole, Tokenizer};
use crate::nn::{
    init_weight, seeded_normal, Binder, Matrix, ParamStore, Tape, TransformerLayer, Var,
};
use crate::promptgen::PromptBundleVars;

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedLmConfig {
    pub d_t: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_positions: usize,
    pub seed: u64,
}

impl Default for MaskedLmConfig {
    fn default() -> Self {
        MaskedLmConfig {
            d_t: 1024,
            layers: 2,
            heads: 8,
            max_positions: 128,
            seed: 0,
        }
    }
}

const PREFIX: &str = "lm";

/// The masked LM. Vocabulary geometry comes from the tokenizer: the
/// embedding table covers the base vocabulary plus the reserved pseudo ids,
/// while the prediction head scores base-vocabulary words only.
#[derive(Debug, Clone)]
pub struct MaskedLm {
    pub cfg: MaskedLmConfig,
    vocab_size: usize,
    total_ids: usize,
    encoder: Vec<TransformerLayer>,
}

impl MaskedLm {
    pub fn new(cfg: MaskedLmConfig, tokenizer: &Tokenizer) -> Self {
        assert!(cfg.heads >= 1 && cfg.d_t % cfg.heads == 0, "d_t must divide by heads");
        let encoder = (0..cfg.layers)
            .map(|i| TransformerLayer::new(format!("{PREFIX}.layer{i}"), cfg.d_t, cfg.heads, 4 * cfg.d_t))
            .collect();
        MaskedLm {
            vocab_size: tokenizer.vocab_size(),
            total_ids: tokenizer.total_ids(),
            cfg,
            encoder,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn register_params(&self, store: &mut ParamStore) {
        let cfg = &self.cfg;
        store.insert(
            "lm.tok_emb",
            seeded_normal(self.total_ids, cfg.d_t, 0.5, cfg.seed, "lm.tok_emb"),
        );
        store.insert(
            "lm.pos_emb",
            seeded_normal(cfg.max_positions, cfg.d_t, 0.1, cfg.seed, "lm.pos_emb"),
        );
        for layer in &self.encoder {
            layer.register(store, cfg.seed);
        }
        store.insert(
            "lm.head.w",
            init_weight(cfg.d_t, self.vocab_size, cfg.seed, "lm.head.w"),
        );
        store.insert("lm.head.b", Matrix::zeros(1, self.vocab_size));
    }

    pub fn is_lm_param(name: &str) -> bool {
        name.starts_with("lm.")
    }

    /// Token embeddings for a plan, with pseudo positions carrying the
    /// bundle vectors and every other position its table row.
    pub fn embed_plan<'t>(
        &self,
        b: &Binder<'t, '_>,
        plan: &TokenPlan,
        bundle: Option<&PromptBundleVars<'t>>,
    ) -> Result<Var<'t>, ClozeError> {
        let table = b.param("lm.tok_emb");
        let mut rows: Vec<Var<'t>> = Vec::with_capacity(plan.len());
        for (position, (id, role)) in plan.tokens.iter().enumerate() {
            match role {
                TokenRole::Pseudo(group, index) => {
                    let bundle = bundle.ok_or(ClozeError::InjectionMismatch {
                        position,
                        group: *group,
                        index: *index,
                        available: 0,
                    })?;
                    let vectors = match group {
                        super::PromptGroup::ELeft => &bundle.e_left,
                        super::PromptGroup::PLeft => &bundle.p_left,
                        super::PromptGroup::PRight => &bundle.p_right,
                        super::PromptGroup::ERight => &bundle.e_right,
                    };
                    let var = vectors.get(*index).ok_or(ClozeError::InjectionMismatch {
                        position,
                        group: *group,
                        index: *index,
                        available: vectors.len(),
                    })?;
                    rows.push(*var);
                }
                _ => rows.push(table.gather_rows(&[*id])),
            }
        }
        Ok(b.tape().concat_rows(&rows))
    }

    /// Runs the encoder over an embedded sequence and returns the
    /// base-vocabulary logits at the mask position.
    pub fn forward_mask_logits<'t>(
        &self,
        b: &Binder<'t, '_>,
        embedded: Var<'t>,
        mask_position: usize,
    ) -> Var<'t> {
        assert!(
            embedded.rows() <= self.cfg.max_positions,
            "sequence length {} exceeds max positions {}",
            embedded.rows(),
            self.cfg.max_positions
        );
        let positions: Vec<usize> = (0..embedded.rows()).collect();
        let pos = b.param("lm.pos_emb").gather_rows(&positions);
        let mut hidden = embedded.add(pos);
        for layer in &self.encoder {
            hidden = layer.forward(b, hidden);
        }
        hidden
            .slice_rows(mask_position, 1)
            .matmul(b.param("lm.head.w"))
            .add_row(b.param("lm.head.b"))
    }

    /// Log-probabilities (1 x vocab) at the mask position.
    pub fn forward_mask_log_probs<'t>(
        &self,
        b: &Binder<'t, '_>,
        embedded: Var<'t>,
        mask_position: usize,
    ) -> Var<'t> {
        self.forward_mask_logits(b, embedded, mask_position).log_softmax_rows()
    }

    /// Hidden states of a plain token-id sequence after the embedding stage
    /// and after each encoder layer (no injection, no head). Used for
    /// shared-weights semantic pooling.
    pub fn encode_layer_states(&self, store: &ParamStore, ids: &[usize]) -> Vec<Matrix> {
        let tape = Tape::new();
        let b = Binder::new(&tape, store);
        let positions: Vec<usize> = (0..ids.len()).collect();
        let mut hidden = b
            .param("lm.tok_emb")
            .gather_rows(ids)
            .add(b.param("lm.pos_emb").gather_rows(&positions));
        let mut states = vec![hidden.value()];
        for layer in &self.encoder {
            hidden = layer.forward(&b, hidden);
            states.push(hidden.value());
        }
        states
    }
}

/// Plain-value injection: the embedding sequence for a plan, pseudo slots
/// overridden by the bundle.
pub fn inject_embeddings(
    plan: &TokenPlan,
    bundle: Option<&crate::promptgen::PromptBundle>,
    lm: &MaskedLm,
    store: &ParamStore,
) -> Result<Matrix, ClozeError> {
    let tape = Tape::new();
    let binder = Binder::new(&tape, store);
    let bundle_vars = bundle.map(|b| lift_bundle(&binder, b));
    let embedded = lm.embed_plan(&binder, plan, bundle_vars.as_ref())?;
    Ok(embedded.value())
}

/// Plain-value prediction: full-vocabulary distribution at the mask.
pub fn predict_mask_distribution(
    embedded: &Matrix,
    mask_position: usize,
    lm: &MaskedLm,
    store: &ParamStore,
) -> MaskDistribution {
    let tape = Tape::new();
    let binder = Binder::new(&tape, store);
    let input = binder.constant(embedded.clone());
    let probs = lm
        .forward_mask_logits(&binder, input, mask_position)
        .softmax_rows()
        .value();
    MaskDistribution { probs: probs.data }
}

/// Lifts a plain bundle onto a tape as constants (inference path).
pub fn lift_bundle<'t>(
    binder: &Binder<'t, '_>,
    bundle: &crate::promptgen::PromptBundle,
) -> PromptBundleVars<'t> {
    let lift = |group: &[Vec<f64>]| -> Vec<Var<'t>> {
        group
            .iter()
            .map(|v| binder.constant(Matrix::row_vec(v.clone())))
            .collect()
    };
    PromptBundleVars {
        mode: bundle.mode,
        e_left: lift(&bundle.e_left),
        p_left: lift(&bundle.p_left),
        p_right: lift(&bundle.p_right),
        e_right: lift(&bundle.e_right),
    }
}
