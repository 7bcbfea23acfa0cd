//! Training: masked-word cross entropy, the ADAM loop with conversation-level
//! gradient accumulation, and binary checkpoints that restore training
//! bit-exactly.

mod checkpoint;

use thiserror::Error;

use crate::cloze::{MaskDistribution, TokenId};
use crate::corpus::Corpus;
use crate::eval::evaluate_with_params;
use crate::model::{CisperModel, FeatureSet, ModelError};
use crate::nn::{keyed_rng, Adam, Binder, ParamStore, Tape, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};

/// Probabilities below this clamp to it before the log (flagged in logs).
pub const LOG_STABILITY_EPSILON: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite loss at step {step} (conversations {conversations:?})")]
    NonFiniteLoss {
        step: u64,
        conversations: Vec<String>,
    },
    #[error("training corpus has no labeled utterances")]
    NothingToTrain,
}

/// One epoch of the training log.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_weighted_f1: f64,
}

/// Masked-word cross entropy over a batch: the negative mean log-probability
/// of the gold label words across all utterances present.
pub fn compute_loss(distributions: &[MaskDistribution], gold_words: &[TokenId]) -> f64 {
    assert_eq!(
        distributions.len(),
        gold_words.len(),
        "one gold word per distribution"
    );
    assert!(!distributions.is_empty(), "loss of an empty batch");
    let mut total = 0.0;
    for (dist, gold) in distributions.iter().zip(gold_words.iter()) {
        let mut p = dist.probs[*gold];
        if p < LOG_STABILITY_EPSILON {
            log::warn!("clamping zero probability for gold token {gold}");
            p = LOG_STABILITY_EPSILON;
        }
        total -= p.ln();
    }
    total / distributions.len() as f64
}

/// Everything `train` returns besides the checkpoint file itself.
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochRecord>,
}

/// Runs the prompt+LM tuning loop. Batch unit is the conversation; gradients
/// accumulate until `batch_size` utterances contributed, then one ADAM step
/// applies. Keeps the best-validation parameters.
pub fn train(
    model: &mut CisperModel,
    train_corpus: &Corpus,
    val_corpus: Option<&Corpus>,
    features: &FeatureSet,
    resume: Option<Checkpoint>,
) -> Result<TrainOutcome, TrainError> {
    let config = model.config.clone();
    let mut adam = Adam::new(&model.params, config.learning_rate, config.weight_decay);
    let mut log: Vec<EpochRecord> = Vec::new();
    let mut start_epoch = 0;
    if let Some(ckpt) = resume {
        model.params = ckpt.params;
        adam.m = ckpt.adam_m;
        adam.v = ckpt.adam_v;
        adam.step_count = ckpt.adam_step;
        start_epoch = ckpt.epoch;
        log = ckpt.metric_history;
    }

    let labeled: usize = train_corpus
        .conversations
        .iter()
        .flat_map(|c| c.utterances.iter())
        .filter(|u| u.emotion.is_some())
        .count();
    if labeled == 0 {
        return Err(TrainError::NothingToTrain);
    }

    let mut best: Option<(f64, ParamStore)> = None;
    let mut stale_epochs = 0usize;

    for epoch in start_epoch..config.epochs {
        let mut order: Vec<usize> = (0..train_corpus.conversations.len()).collect();
        shuffle(&mut order, config.seed, epoch as u64);

        let mut grads = model.params.zeros_like();
        let mut accumulated = 0usize;
        let mut batch_ids: Vec<String> = Vec::new();
        let mut epoch_nll = 0.0;
        let mut epoch_count = 0usize;

        for conv_idx in order {
            let conversation = &train_corpus.conversations[conv_idx];
            let conv_features = features
                .get(&conversation.id)
                .ok_or_else(|| ModelError::MissingFeatures(conversation.id.clone()))?;
            let targets = model.targets_for(conversation)?;
            if targets.is_empty() {
                continue;
            }

            let tape = Tape::new();
            let binder = Binder::new(&tape, &model.params);
            let bundles = model.bundles_for(&binder, conv_features)?;
            let mut terms: Vec<Var<'_>> = Vec::with_capacity(targets.len());
            for target in &targets {
                let bundle = bundles.as_ref().map(|b| &b[target.utterance_index]);
                let log_probs = model.utterance_log_probs(&binder, &target.plan, bundle)?;
                terms.push(log_probs.pick(0, target.gold_id).scale(-1.0));
            }
            // sum here; the division by utterance count happens at step time
            let mut conv_loss = terms[0];
            for term in &terms[1..] {
                conv_loss = conv_loss.add(*term);
            }
            let conv_loss_value = conv_loss.scalar();
            if !conv_loss_value.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    step: adam.step_count,
                    conversations: vec![conversation.id.clone()],
                });
            }
            epoch_nll += conv_loss_value;
            epoch_count += targets.len();

            let tape_grads = tape.backward(conv_loss);
            binder.accumulate_grads(&tape_grads, &mut grads);
            accumulated += targets.len();
            batch_ids.push(conversation.id.clone());

            if accumulated >= config.batch_size {
                apply_step(model, &mut adam, &mut grads, accumulated, &mut batch_ids)?;
                accumulated = 0;
            }
        }
        if accumulated > 0 {
            apply_step(model, &mut adam, &mut grads, accumulated, &mut batch_ids)?;
        }

        let train_loss = epoch_nll / epoch_count as f64;
        let val_weighted_f1 = match val_corpus {
            Some(val) => evaluate_with_params(model, val, features)
                .map(|report| report.weighted_f1)
                .unwrap_or(0.0),
            None => 0.0,
        };
        log.push(EpochRecord {
            epoch,
            train_loss,
            val_weighted_f1,
        });
        log::info!("epoch {epoch}: train loss {train_loss:.6}, val weighted-F1 {val_weighted_f1:.4}");

        // best-model selection and early stopping only make sense with a
        // validation set; ties prefer the later epoch (lower training loss
        // at equal validation score)
        if val_corpus.is_some() {
            if best.as_ref().map_or(true, |(b, _)| val_weighted_f1 >= *b) {
                best = Some((val_weighted_f1, model.params.clone()));
                stale_epochs = 0;
            } else {
                stale_epochs += 1;
                if config.early_stop_patience > 0 && stale_epochs >= config.early_stop_patience {
                    log::info!("early stop after {} stale epochs", stale_epochs);
                    break;
                }
            }
        }
    }

    // keep the best-validation parameters when a validation set exists
    let params = match (val_corpus, best) {
        (Some(_), Some((_, best_params))) => best_params,
        _ => model.params.clone(),
    };
    model.params = params.clone();

    let checkpoint = Checkpoint {
        config,
        label_set: model.label_set.clone(),
        vocab: model.tokenizer.vocab().to_vec(),
        epoch: log.last().map_or(0, |r| r.epoch + 1),
        params,
        adam_m: adam.m.clone(),
        adam_v: adam.v.clone(),
        adam_step: adam.step_count,
        metric_history: log.clone(),
    };
    Ok(TrainOutcome { checkpoint, log })
}

fn apply_step(
    model: &mut CisperModel,
    adam: &mut Adam,
    grads: &mut ParamStore,
    accumulated: usize,
    batch_ids: &mut Vec<String>,
) -> Result<(), TrainError> {
    grads.scale_all(1.0 / accumulated as f64);
    if !grads.all_finite() {
        return Err(TrainError::NonFiniteLoss {
            step: adam.step_count,
            conversations: std::mem::take(batch_ids),
        });
    }
    let config = model.config.clone();
    adam.step(&mut model.params, grads, |name| {
        CisperModel::is_trainable_under(&config, name)
    });
    *grads = model.params.zeros_like();
    batch_ids.clear();
    Ok(())
}

/// Fisher-Yates with a (seed, epoch)-keyed generator, so resumed runs see
/// the same order as uninterrupted ones.
fn shuffle(order: &mut [usize], seed: u64, epoch: u64) {
    use rand::Rng;
    let mut rng = keyed_rng(seed, &format!("shuffle\u{1}{epoch}"));
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(probs: Vec<f64>) -> MaskDistribution {
        MaskDistribution { probs }
    }

    #[test]
    fn certain_prediction_has_zero_loss() {
        let loss = compute_loss(&[dist(vec![0.0, 1.0])], &[1]);
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn hand_computed_two_utterance_loss() {
        // oracle: -(ln 0.5 + ln 0.25) / 2
        let loss = compute_loss(
            &[dist(vec![0.5, 0.5]), dist(vec![0.25, 0.75])],
            &[0, 0],
        );
        let expected = -(0.5f64.ln() + 0.25f64.ln()) / 2.0;
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 1.0397).abs() < 1e-4);
    }

    #[test]
    fn batch_loss_is_mean_of_singles() {
        let batch = vec![
            dist(vec![0.7, 0.3]),
            dist(vec![0.2, 0.8]),
            dist(vec![0.55, 0.45]),
        ];
        let golds = vec![0, 1, 1];
        let batched = compute_loss(&batch, &golds);
        // oracle: unbatched loop
        let mean_of_singles: f64 = batch
            .iter()
            .zip(golds.iter())
            .map(|(d, g)| compute_loss(std::slice::from_ref(d), std::slice::from_ref(g)))
            .sum::<f64>()
            / 3.0;
        assert!((batched - mean_of_singles).abs() < 1e-12);
    }

    #[test]
    fn zero_probability_is_clamped() {
        let loss = compute_loss(&[dist(vec![1.0, 0.0])], &[1]);
        assert!(loss.is_finite());
        assert!((loss - (-LOG_STABILITY_EPSILON.ln())).abs() < 1e-9);
    }

    #[test]
    fn shuffle_is_reproducible_and_epoch_dependent() {
        let mut a: Vec<usize> = (0..10).collect();
        let mut b: Vec<usize> = (0..10).collect();
        let mut c: Vec<usize> = (0..10).collect();
        shuffle(&mut a, 3, 0);
        shuffle(&mut b, 3, 0);
        shuffle(&mut c, 3, 1);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
