//! LM pretraining of the prediction network and text-only adaptation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Result};
use crate::model::{LanguageModel, LsTransducer, NextTokenLm, Optimizer, OptimizerKind, Vocabulary};
use crate::numcore::{NodeId, ParamStore, Tape};

/// Settings of a next-token CE training run.
#[derive(Debug, Clone, PartialEq)]
pub struct LmTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        Self { epochs: 10, lr: 3e-3, batch_size: 16, optimizer: OptimizerKind::Adam, seed: 0 }
    }
}

/// Which prediction-network layers stay fixed during adaptation.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptPlan {
    /// Embedding plus this many lowest prediction layers are frozen.
    pub freeze_lower: usize,
    /// Whether the shared output FC is fine-tuned with the upper layers.
    pub train_output_fc: bool,
    pub train: LmTrainConfig,
}

impl AdaptPlan {
    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.freeze_lower > num_layers {
            bail!(Config, "freeze_lower {} exceeds {} prediction layers", self.freeze_lower, num_layers);
        }
        if self.train.batch_size == 0 {
            bail!(Config, "batch_size must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct LmEpoch {
    pub epoch: usize,
    /// Token-weighted mean CE over the epoch's batches, in nats.
    pub train_ce: f64,
    pub heldout_perplexity: Option<f64>,
}

fn check_text(text: &[Vec<usize>], vocab: &Vocabulary) -> Result<()> {
    if text.iter().all(|s| s.is_empty()) {
        bail!(Invalid, "no training text");
    }
    for s in text {
        if let Some(&bad) = s.iter().find(|&&t| !vocab.is_normal(t)) {
            bail!(Invalid, "token id {} is outside the model vocabulary of {} tokens", bad, vocab.num_normal());
        }
    }
    Ok(())
}

fn train_loop<M: NextTokenLm>(
    model: &mut M,
    text: &[Vec<usize>],
    heldout: &[Vec<usize>],
    cfg: &LmTrainConfig,
    loss: impl Fn(&M, &mut Tape, &[&[usize]]) -> Result<NodeId>,
    store: impl Fn(&mut M) -> &mut ParamStore,
) -> Result<Vec<LmEpoch>> {
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..text.len()).filter(|&i| !text[i].is_empty()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut count) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let sentences: Vec<&[usize]> = batch.iter().map(|&i| text[i].as_slice()).collect();
            let tokens: usize = sentences.iter().map(|s| s.len() + 1).sum();
            let mut tape = Tape::new();
            let node = loss(model, &mut tape, &sentences)?;
            total += tape.value(node).item() * tokens as f64;
            count += tokens;
            let grads = tape.backward(node)?;
            grads.accumulate_into(&tape, store(model));
            opt.step(store(model));
        }
        let heldout_perplexity = if heldout.is_empty() { None } else { Some(model.perplexity(heldout)?) };
        log::debug!("lm epoch {epoch}: ce {:.4}", total / count.max(1) as f64);
        history.push(LmEpoch { epoch, train_ce: total / count.max(1) as f64, heldout_perplexity });
    }
    Ok(history)
}

/// Trains a standalone prediction-network LM by next-token CE.
pub fn pretrain_lm(lm: &mut LanguageModel, text: &[Vec<usize>], heldout: &[Vec<usize>], cfg: &LmTrainConfig) -> Result<Vec<LmEpoch>> {
    check_text(text, lm.vocab())?;
    if !heldout.is_empty() {
        check_text(heldout, lm.vocab())?;
    }
    train_loop(lm, text, heldout, cfg, |m, tape, batch| m.lm_loss_node(tape, batch), |m| m.store_mut())
}

/// Fine-tunes the upper prediction layers on target-domain text.
///
/// Only prediction-network tensors above `freeze_lower` (and the output FC
/// when enabled) change; the encoder, AIF projection, label FC and CTC head
/// are returned bit-identical.
pub fn adapt_prediction(
    model: &LsTransducer,
    text: &[Vec<usize>],
    heldout: &[Vec<usize>],
    plan: &AdaptPlan,
) -> Result<(LsTransducer, Vec<LmEpoch>)> {
    plan.validate(model.config().pred_layers)?;
    check_text(text, model.vocab())?;
    let layers = model.config().pred_layers;
    let mut adapted = model.clone();
    for p in adapted.store_mut().iter_mut() {
        p.trainable = is_adaptable(&p.name, plan, layers);
    }
    let history = train_loop(&mut adapted, text, heldout, &plan.train, |m, tape, batch| m.lm_loss_node(tape, batch), |m| {
        m.store_mut()
    })?;
    for p in adapted.store_mut().iter_mut() {
        p.trainable = true;
    }
    Ok((adapted, history))
}

/// Whether adaptation under `plan` may change the tensor called `name`.
/// The final norm and output FC move only while some upper layer is tuned.
pub fn is_adaptable(name: &str, plan: &AdaptPlan, num_layers: usize) -> bool {
    if !name.starts_with("pred.") || LsTransducer::is_lower_prediction_param(name, plan.freeze_lower) {
        return false;
    }
    if plan.freeze_lower >= num_layers {
        return false;
    }
    plan.train_output_fc || !name.starts_with("pred.out.")
}
