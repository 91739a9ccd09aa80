//! Encoder and prediction network stacks.

use rand::Rng;

use super::config::ModelConfig;
use super::layers::{causal_mask, chunk_mask, positional_encoding, Block, LayerNorm, Linear};
use crate::error::{bail, Result};
use crate::numcore::{Matrix, NodeId, ParamId, ParamStore, Tape};

/// Logit offset of the weight channel at initialisation: `sigmoid(-1.1) ≈ 0.25`.
const INIT_WEIGHT_BIAS: f64 = -1.1;

#[derive(Debug, Clone)]
pub(crate) struct Encoder {
    input: Linear,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    out: Linear,
    dim: usize,
}

impl Encoder {
    pub fn register<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let input = Linear::register(store, "enc.in", cfg.feat_dim, cfg.enc_dim, (1.0 / cfg.feat_dim as f64).sqrt(), rng);
        let blocks =
            (0..cfg.enc_layers).map(|i| Block::register(store, &format!("enc.block{i}"), cfg.enc_dim, cfg.enc_ffn, rng)).collect();
        let ln_f = LayerNorm::register(store, "enc.ln_f", cfg.enc_dim);
        let out = Linear::register(store, "enc.out", cfg.enc_dim, cfg.enc_out_dim(), (1.0 / cfg.enc_dim as f64).sqrt(), rng);
        store.get_mut(out.b).value.set(0, cfg.content_dim, INIT_WEIGHT_BIAS);
        Self { input, blocks, ln_f, out, dim: cfg.enc_dim }
    }

    /// `T × d` encoder states; frame `t` only sees frames of its own and earlier chunks.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, frames: &Matrix, chunk_size: usize) -> Result<NodeId> {
        if frames.rows() == 0 {
            bail!(Invalid, "cannot encode zero frames");
        }
        if chunk_size == 0 {
            bail!(Config, "chunk_size must be at least 1");
        }
        let x = tape.leaf(frames.clone());
        let h = self.input.forward(tape, store, x)?;
        let pe = tape.leaf(positional_encoding(frames.rows(), self.dim));
        let mut h = tape.add(h, pe)?;
        let mask = chunk_mask(frames.rows(), chunk_size);
        for block in &self.blocks {
            h = block.forward(tape, store, h, &mask)?;
        }
        let h = self.ln_f.forward(tape, store, h)?;
        self.out.forward(tape, store, h)
    }
}

/// Causal transformer over `sos y_1 … y_{L}`; doubles as a standalone LM.
#[derive(Debug, Clone)]
pub(crate) struct PredictionNet {
    embed: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    out: Linear,
    dim: usize,
    input_size: usize,
}

impl PredictionNet {
    pub fn register<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let input_size = cfg.vocab.decoder_size();
        let embed = store.add("pred.embed", Matrix::randn(input_size, cfg.pred_dim, 1.0, rng));
        let blocks = (0..cfg.pred_layers)
            .map(|i| Block::register(store, &format!("pred.block{i}"), cfg.pred_dim, cfg.pred_ffn, rng))
            .collect();
        let ln_f = LayerNorm::register(store, "pred.ln_f", cfg.pred_dim);
        let out = Linear::register(store, "pred.out", cfg.pred_dim, cfg.vocab.decoder_size(), 0.02, rng);
        Self { embed, blocks, ln_f, out, dim: cfg.pred_dim, input_size }
    }

    pub fn num_layers(&self) -> usize {
        self.blocks.len()
    }

    /// `(intermediate at layer tap, final logits)`, both `len × ·`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, tokens: &[usize], tap: usize) -> Result<(NodeId, NodeId)> {
        if tokens.is_empty() {
            bail!(Invalid, "prediction network needs at least the start token");
        }
        if tap == 0 || tap > self.blocks.len() {
            bail!(Config, "tap layer {} outside 1..={}", tap, self.blocks.len());
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.input_size) {
            bail!(Invalid, "token id {} is not a prediction-network input", bad);
        }
        let table = tape.param(store, self.embed);
        let x = tape.gather_rows(table, tokens)?;
        let pe = tape.leaf(positional_encoding(tokens.len(), self.dim));
        let mut h = tape.add(x, pe)?;
        let mask = causal_mask(tokens.len());
        let mut inter = h;
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(tape, store, h, &mask)?;
            if i + 1 == tap {
                inter = h;
            }
        }
        let z = self.ln_f.forward(tape, store, h)?;
        let logits = self.out.forward(tape, store, z)?;
        Ok((inter, logits))
    }

    /// Mean next-token cross-entropy over all tokens of `sentences` (each gets `sos`/`eos`).
    pub fn lm_loss(&self, tape: &mut Tape, store: &ParamStore, sentences: &[&[usize]], sos: usize) -> Result<NodeId> {
        let total: usize = sentences.iter().map(|s| s.len() + 1).sum();
        if total == 0 {
            bail!(Invalid, "empty LM batch");
        }
        let mut terms = Vec::with_capacity(sentences.len());
        for s in sentences {
            let (input, target) = teacher_forcing(s, sos);
            let (_, logits) = self.forward(tape, store, &input, self.blocks.len())?;
            let ce = tape.cross_entropy(logits, &target)?;
            terms.push((ce, target.len() as f64 / total as f64));
        }
        tape.linear_combination(&terms)
    }

    /// Whether the parameter named `name` belongs to the embedding or one of the lowest `layers` blocks.
    pub fn is_lower(name: &str, layers: usize) -> bool {
        name == "pred.embed" || (0..layers).any(|i| name.starts_with(&format!("pred.block{i}.")))
    }
}

/// `(sos y_1 … y_L, y_1 … y_L eos)`; `sos` and `eos` share one id.
pub fn teacher_forcing(tokens: &[usize], sos: usize) -> (Vec<usize>, Vec<usize>) {
    let mut input = Vec::with_capacity(tokens.len() + 1);
    input.push(sos);
    input.extend_from_slice(tokens);
    let mut target = tokens.to_vec();
    target.push(sos);
    (input, target)
}
