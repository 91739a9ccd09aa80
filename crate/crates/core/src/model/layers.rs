//! Transformer building blocks on the tape.

use rand::Rng;

use crate::align::fc;
use crate::ctc::NEG_SENTINEL;
use crate::error::Result;
use crate::numcore::{Matrix, NodeId, ParamId, ParamStore, Tape};

#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn register<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, input: usize, output: usize, std: f64, rng: &mut R) -> Self {
        let w = store.add(format!("{name}.w"), Matrix::randn(input, output, std, rng));
        let b = store.add(format!("{name}.b"), Matrix::zeros(1, output));
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        fc(tape, store, x, self.w, self.b)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn register(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.g"), Matrix::filled(1, dim, 1.0));
        let bias = store.add(format!("{name}.b"), Matrix::zeros(1, dim));
        Self { gain, bias }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b)
    }
}

/// Pre-norm block: single-head masked self-attention then a GELU feed-forward.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Block {
    ln1: LayerNorm,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    dim: usize,
}

impl Block {
    pub fn register<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, ffn: usize, rng: &mut R) -> Self {
        let std = (1.0 / dim as f64).sqrt();
        let ln1 = LayerNorm::register(store, &format!("{name}.ln1"), dim);
        let wq = store.add(format!("{name}.attn.q"), Matrix::randn(dim, dim, std, rng));
        let wk = store.add(format!("{name}.attn.k"), Matrix::randn(dim, dim, std, rng));
        let wv = store.add(format!("{name}.attn.v"), Matrix::randn(dim, dim, std, rng));
        let wo = store.add(format!("{name}.attn.o"), Matrix::randn(dim, dim, std * 0.5, rng));
        let ln2 = LayerNorm::register(store, &format!("{name}.ln2"), dim);
        let ff1 = Linear::register(store, &format!("{name}.ff1"), dim, ffn, std, rng);
        let ff2 = Linear::register(store, &format!("{name}.ff2"), ffn, dim, (1.0 / ffn as f64).sqrt() * 0.5, rng);
        Self { ln1, wq, wk, wv, wo, ln2, ff1, ff2, dim }
    }

    /// `mask` is additive, `n × n`, `0` where attention is allowed.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId, mask: &Matrix) -> Result<NodeId> {
        let z = self.ln1.forward(tape, store, x)?;
        let proj = |tape: &mut Tape, w: ParamId| {
            let wn = tape.param(store, w);
            tape.matmul(z, wn)
        };
        let q = proj(tape, self.wq)?;
        let k = proj(tape, self.wk)?;
        let v = proj(tape, self.wv)?;
        let scores = tape.matmul_bt(q, k)?;
        let scores = tape.scale(scores, 1.0 / (self.dim as f64).sqrt());
        let attn = tape.softmax_rows_masked(scores, mask)?;
        let ctx = tape.matmul(attn, v)?;
        let wo = tape.param(store, self.wo);
        let out = tape.matmul(ctx, wo)?;
        let h = tape.add(x, out)?;

        let z = self.ln2.forward(tape, store, h)?;
        let f = self.ff1.forward(tape, store, z)?;
        let f = tape.gelu(f);
        let f = self.ff2.forward(tape, store, f)?;
        tape.add(h, f)
    }
}

/// Sinusoidal position table, `rows × dim`.
pub(crate) fn positional_encoding(rows: usize, dim: usize) -> Matrix {
    Matrix::from_fn(rows, dim, |t, c| {
        let rate = 10000f64.powf(-((c / 2 * 2) as f64) / dim as f64);
        let angle = t as f64 * rate;
        if c % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Additive mask letting frame `t` attend to every frame in its own or an earlier chunk.
pub fn chunk_mask(frames: usize, chunk_size: usize) -> Matrix {
    let chunk_size = chunk_size.max(1);
    Matrix::from_fn(frames, frames, |t, s| if s / chunk_size <= t / chunk_size { 0.0 } else { NEG_SENTINEL })
}

/// Additive lower-triangular mask.
pub fn causal_mask(len: usize) -> Matrix {
    chunk_mask(len, 1)
}
