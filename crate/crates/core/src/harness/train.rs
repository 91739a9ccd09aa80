//! Mini-batch training of the transducer on a synthetic corpus.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::domain::SyntheticUtterance;
use crate::error::{bail, Result};
use crate::model::{Example, LossBundle, LsTransducer, Optimizer, OptimizerKind, DEFAULT_GAMMA, DEFAULT_MU};
use crate::numcore::Tape;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub gamma: f64,
    pub mu: f64,
    /// Multiplies the step size after every epoch.
    pub lr_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            lr: 2e-3,
            batch_size: 8,
            optimizer: OptimizerKind::Adam,
            gamma: DEFAULT_GAMMA,
            mu: DEFAULT_MU,
            lr_decay: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            bail!(Config, "batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            bail!(Config, "lr must be positive and lr_decay in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(self.mu >= 0.0) {
            bail!(Config, "gamma must lie in [0, 1] and mu be nonnegative");
        }
        Ok(())
    }
}

/// Epoch means of the loss components.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub l_ctc: f64,
    pub l_ce: f64,
    pub l_qua: f64,
    pub l_all: f64,
    pub lr: f64,
    pub mean_grad_norm: f64,
}

/// Trains in place and returns per-epoch statistics. Utterances are shuffled
/// each epoch from `cfg.seed`.
pub fn train_transducer(
    model: &mut LsTransducer,
    train: &[SyntheticUtterance],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats, &LsTransducer),
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    if train.is_empty() {
        bail!(Invalid, "no training utterances");
    }
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut bundles: Vec<LossBundle> = Vec::with_capacity(train.len());
        let (mut norms, mut steps) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let examples: Vec<Example> =
                batch.iter().map(|&i| Example { frames: &train[i].frames, tokens: &train[i].tokens }).collect();
            let mut tape = Tape::new();
            let loss = model.forward_training(&mut tape, &examples, cfg.gamma, cfg.mu)?;
            let grads = tape.backward(loss.total)?;
            grads.accumulate_into(&tape, model.store_mut());
            let norm = opt.step(model.store_mut());
            if !norm.is_finite() {
                bail!(Gradient, "non-finite gradient norm in epoch {epoch}");
            }
            norms += norm;
            steps += 1;
            bundles.extend(loss.bundles);
        }
        let n = bundles.len() as f64;
        let mean = |f: fn(&LossBundle) -> f64| bundles.iter().map(f).sum::<f64>() / n;
        let stats = EpochStats {
            epoch,
            l_ctc: mean(|b| b.l_ctc),
            l_ce: mean(|b| b.l_ce),
            l_qua: mean(|b| b.l_qua),
            l_all: mean(|b| b.l_all),
            lr: opt.lr,
            mean_grad_norm: norms / steps as f64,
        };
        log::info!(
            "epoch {epoch}: l_all {:.4} (ctc {:.4}, ce {:.4}, qua {:.4})",
            stats.l_all,
            stats.l_ctc,
            stats.l_ce,
            stats.l_qua
        );
        on_epoch(&stats, model);
        history.push(stats);
        opt.lr *= cfg.lr_decay;
    }
    Ok(history)
}
