//! Label-synchronous joint beam search.
//!
//! Every active hypothesis has the same length `n`, so all of them share the
//! next label boundary `T_{n+1}`. Each extension is scored by the transducer
//! (AIF extraction up to `T_{n+1}`) and by the CTC prefix score over the same
//! frames. End of sentence is only possible once the whole utterance is read:
//! at that point every hypothesis that ever occupied the beam is closed with
//! `eos`, scored at horizon `T`, and the best closed hypothesis wins.
//!
//! Streaming and whole-utterance decoding take identical steps: the encoder is
//! chunk-causal, so encoder rows of completed chunks never change, and a step
//! is only taken once its boundary lies inside completed chunks.

use std::cmp::Ordering;
use std::sync::Arc;

use serde::Serialize;

use crate::align::scan_boundary;
use crate::ctc::{grow_horizon, prefix_extend, prefix_score_eos, CtcPosterior, PrefixScore, PrefixState, NEG_SENTINEL};
use crate::error::{bail, Result};
use crate::model::{AifMemory, EncoderStates, LsTransducer, NextTokenLm, Vocabulary};
use crate::numcore::Matrix;

/// Slack added to `⌈Σα⌉` for the default label cap.
pub const LABEL_CAP_SLACK: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    /// Weight of the CTC prefix score.
    pub beta: f64,
    pub beam_size: usize,
    /// Shallow-fusion weight of the external LM.
    pub lm_weight: f64,
    /// Fixed label cap; `None` uses `⌈Σα⌉ + 5`.
    pub max_labels: Option<usize>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { beta: 0.3, beam_size: 10, lm_weight: 0.0, max_labels: None }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            bail!(Config, "beta {} outside [0, 1]", self.beta);
        }
        if self.beam_size == 0 {
            bail!(Config, "beam_size must be at least 1");
        }
        if !(self.lm_weight >= 0.0) {
            bail!(Config, "lm_weight {} must be nonnegative", self.lm_weight);
        }
        Ok(())
    }
}

/// `β·s_ctc + (1−β)·s_lst`; an impossible CTC score dominates whenever it carries weight.
pub fn combine(s_ctc: PrefixScore, s_lst: f64, beta: f64) -> f64 {
    if beta > 0.0 && s_ctc.is_impossible() {
        return NEG_SENTINEL;
    }
    let ctc = if beta > 0.0 { beta * s_ctc.value() } else { 0.0 };
    let v = ctc + (1.0 - beta) * s_lst;
    v.max(NEG_SENTINEL)
}

/// Adds `lm_weight · log p_lm` to each extension score.
pub fn shallow_fusion(scores: &[f64], lm_log_probs: &[f64], lm_weight: f64) -> Result<Vec<f64>> {
    if scores.len() != lm_log_probs.len() {
        bail!(Dimension, "{} extension scores vs {} LM probabilities", scores.len(), lm_log_probs.len());
    }
    if lm_weight == 0.0 {
        return Ok(scores.to_vec());
    }
    Ok(scores.iter().zip(lm_log_probs).map(|(s, l)| (s + lm_weight * l).max(NEG_SENTINEL)).collect())
}

#[derive(Debug, Clone)]
pub struct Hypothesis {
    /// Normal tokens after the implicit `sos`.
    pub tokens: Vec<usize>,
    /// Transducer log score: sum of per-label log-probabilities.
    pub s_lst: f64,
    pub s_ctc: PrefixScore,
    /// Accumulated external-LM log-probability (unweighted).
    pub s_lm: f64,
    /// Combined ranking score.
    pub score: f64,
    /// `T_i` of every token (the `eos` of a complete hypothesis is not listed).
    pub boundaries: Vec<usize>,
    pub complete: bool,
    ctc_state: Arc<PrefixState>,
}

impl PartialEq for Hypothesis {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens
            && self.s_lst.to_bits() == other.s_lst.to_bits()
            && self.s_ctc.value().to_bits() == other.s_ctc.value().to_bits()
            && self.s_lm.to_bits() == other.s_lm.to_bits()
            && self.score.to_bits() == other.score.to_bits()
            && self.boundaries == other.boundaries
            && self.complete == other.complete
    }
}

impl Hypothesis {
    pub fn ctc_state(&self) -> &PrefixState {
        &self.ctc_state
    }
}

/// Higher score first, then shorter, then lexicographically smaller.
pub fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.tokens.len().cmp(&b.tokens.len()))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Beam {
    /// Sorted by [`rank`], at most `beam_size` entries.
    pub active: Vec<Hypothesis>,
    /// Closed hypotheses, sorted by [`rank`] once decoding ends.
    pub finished: Vec<Hypothesis>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeStatus {
    Complete,
    /// No audio was given.
    Empty,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    pub tokens: Vec<usize>,
    pub score: f64,
    pub boundaries: Vec<usize>,
    pub status: DecodeStatus,
    pub frames: usize,
    /// Active hypotheses after each label step, starting with the empty one.
    pub history: Vec<Vec<Hypothesis>>,
    /// Final beam; `finished` holds every closed hypothesis, best first.
    pub beam: Beam,
}

/// One line of decoder output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecodeRecord {
    pub id: String,
    pub tokens: Vec<String>,
    pub score: f64,
    /// `(token, T_i)` pairs.
    pub alignment: Vec<(String, usize)>,
    pub status: DecodeStatus,
}

impl DecodeRecord {
    pub fn new(id: &str, result: &DecodeResult, vocab: &Vocabulary) -> Self {
        Self {
            id: id.to_string(),
            tokens: result.tokens.iter().map(|&t| vocab.symbol(t).to_string()).collect(),
            score: result.score,
            alignment: result.tokens.iter().zip(&result.boundaries).map(|(&t, &b)| (vocab.symbol(t).to_string(), b)).collect(),
            status: result.status,
        }
    }
}

/// Transducer log-distribution (normal tokens, unk, eos) of the label following
/// `tokens`, extracted from encoder frames `1..=boundary`.
pub fn transducer_step(model: &LsTransducer, tokens: &[usize], memory: &AifMemory, boundary: usize) -> Result<Vec<f64>> {
    let mut input = Vec::with_capacity(tokens.len() + 1);
    input.push(model.vocab().sos());
    input.extend_from_slice(tokens);
    let pred = model.predict(&input)?;
    let last = input.len() - 1;
    model.label_log_probs(pred.intermediate.row(last), pred.final_logits.row(last), memory, boundary)
}

/// Encoder-side state of a session: finalized rows only.
struct Acoustics {
    enc: EncoderStates,
    alpha: Vec<f64>,
    posterior: CtcPosterior,
    memory: AifMemory,
}

/// Incremental decoder fed one chunk of frames at a time.
pub struct StreamingSession<'a> {
    model: &'a LsTransducer,
    config: DecodeConfig,
    lm: Option<&'a dyn NextTokenLm>,
    frames: Option<Matrix>,
    acoustics: Option<Acoustics>,
    /// Rows whose encoder chunk is complete.
    finalized: usize,
    step: usize,
    beam: Beam,
    history: Vec<Vec<Hypothesis>>,
}

impl<'a> StreamingSession<'a> {
    pub fn new(model: &'a LsTransducer, config: DecodeConfig, lm: Option<&'a dyn NextTokenLm>) -> Result<Self> {
        config.validate()?;
        if let Some(lm) = lm {
            if lm.vocab() != model.vocab() {
                bail!(Config, "shallow-fusion LM vocabulary does not match the model");
            }
        }
        Ok(Self {
            model,
            config,
            lm,
            frames: None,
            acoustics: None,
            finalized: 0,
            step: 0,
            beam: Beam::default(),
            history: Vec::new(),
        })
    }

    pub fn frames_received(&self) -> usize {
        self.frames.as_ref().map_or(0, Matrix::rows)
    }

    /// Labels emitted so far by every active hypothesis.
    pub fn labels_emitted(&self) -> usize {
        self.step
    }

    pub fn push_chunk(&mut self, chunk: &Matrix) -> Result<()> {
        if chunk.rows() == 0 {
            return Ok(());
        }
        let frames = match self.frames.take() {
            None => chunk.clone(),
            Some(f) => Matrix::vstack(&[&f, chunk])?,
        };
        self.frames = Some(frames);
        let c = self.model.config().chunk_size;
        let finalized = self.frames_received() / c * c;
        if finalized > self.finalized {
            self.refresh(finalized)?;
            self.advance(false)?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<DecodeResult> {
        let total = self.frames_received();
        if total == 0 {
            return Ok(DecodeResult {
                tokens: Vec::new(),
                score: 0.0,
                boundaries: Vec::new(),
                status: DecodeStatus::Empty,
                frames: 0,
                history: Vec::new(),
                beam: Beam::default(),
            });
        }
        if self.finalized < total {
            self.refresh(total)?;
        }
        self.advance(true)?;
        self.beam.finished = self.close_all()?;
        let best = self.beam.finished.first().expect("at least the empty hypothesis is closed").clone();
        Ok(DecodeResult {
            tokens: best.tokens.clone(),
            score: best.score,
            boundaries: best.boundaries.clone(),
            status: DecodeStatus::Complete,
            frames: total,
            history: self.history,
            beam: self.beam,
        })
    }

    /// Re-encodes everything received and keeps rows `..finalized`.
    fn refresh(&mut self, finalized: usize) -> Result<()> {
        let frames = self.frames.as_ref().expect("frames present").slice_rows(0, finalized)?;
        let enc = self.model.encode(&frames, self.model.config().chunk_size)?;
        let alpha = crate::align::compute_fire_weights(&enc.e)?.as_slice().to_vec();
        let posterior = self.model.ctc_posterior(&enc)?;
        let memory = self.model.aif_memory(&enc)?;
        self.acoustics = Some(Acoustics { enc, alpha, posterior, memory });
        self.finalized = finalized;
        if self.beam.active.is_empty() && self.history.is_empty() {
            let a = self.acoustics.as_ref().unwrap();
            let state = PrefixState::initial(&a.posterior, 0)?;
            let root = Hypothesis {
                tokens: Vec::new(),
                s_lst: 0.0,
                s_ctc: state.prefix_score(),
                s_lm: 0.0,
                score: 0.0,
                boundaries: Vec::new(),
                complete: false,
                ctc_state: Arc::new(state),
            };
            self.beam.active = vec![root.clone()];
            self.history.push(vec![root]);
        }
        Ok(())
    }

    fn label_cap(&self, at_end: bool) -> Option<usize> {
        match self.config.max_labels {
            Some(cap) => Some(cap),
            None if at_end => {
                let total: f64 = self.acoustics.as_ref().unwrap().alpha.iter().sum();
                Some(total.ceil() as usize + LABEL_CAP_SLACK)
            }
            None => None,
        }
    }

    /// Takes label steps while the next boundary is known.
    fn advance(&mut self, at_end: bool) -> Result<()> {
        let cap = self.label_cap(at_end);
        loop {
            if cap.is_some_and(|c| self.step >= c) || self.beam.active.is_empty() {
                return Ok(());
            }
            let a = self.acoustics.as_ref().unwrap();
            let boundary = match scan_boundary(&a.alpha, self.step + 1) {
                Some(b) => b,
                None if at_end => a.alpha.len(),
                None => return Ok(()),
            };
            // AIF needs at least one frame.
            let boundary = boundary.max(1);
            self.beam.active = self.expand(boundary)?;
            self.step += 1;
            self.history.push(self.beam.active.clone());
        }
    }

    fn expand(&self, boundary: usize) -> Result<Vec<Hypothesis>> {
        let a = self.acoustics.as_ref().unwrap();
        let vocab = self.model.vocab();
        let beta = self.config.beta;
        let mut candidates = Vec::new();
        for hyp in &self.beam.active {
            let lp = transducer_step(self.model, &hyp.tokens, &a.memory, boundary)?;
            let lm_lp = self.lm_log_probs(&hyp.tokens)?;
            let parent = grow_horizon(&hyp.ctc_state, &a.posterior, boundary)?;
            for q in 0..vocab.num_normal() {
                let (state, s_ctc) = prefix_extend(&parent, q, &a.posterior, boundary)?;
                let s_lst = hyp.s_lst + lp[q];
                let s_lm = hyp.s_lm + lm_lp.as_ref().map_or(0.0, |l| l[q]);
                let mut tokens = hyp.tokens.clone();
                tokens.push(q);
                let mut boundaries = hyp.boundaries.clone();
                boundaries.push(boundary);
                candidates.push(Hypothesis {
                    tokens,
                    s_lst,
                    s_ctc,
                    s_lm,
                    score: self.fused(combine(s_ctc, s_lst, beta), s_lm),
                    boundaries,
                    complete: false,
                    ctc_state: Arc::new(state),
                });
            }
        }
        candidates.sort_by(rank);
        candidates.truncate(self.config.beam_size);
        Ok(candidates)
    }

    fn lm_log_probs(&self, tokens: &[usize]) -> Result<Option<Vec<f64>>> {
        match self.lm {
            Some(lm) if self.config.lm_weight > 0.0 => {
                let mut input = vec![self.model.vocab().sos()];
                input.extend_from_slice(tokens);
                Ok(Some(lm.next_log_probs(&input)?))
            }
            _ => Ok(None),
        }
    }

    fn fused(&self, combined: f64, s_lm: f64) -> f64 {
        shallow_fusion(&[combined], &[s_lm], self.config.lm_weight).expect("equal lengths")[0]
    }

    /// Closes every hypothesis that occupied the beam with `eos` at horizon `T`.
    fn close_all(&self) -> Result<Vec<Hypothesis>> {
        let a = self.acoustics.as_ref().unwrap();
        let total = a.enc.frames();
        let eos = self.model.vocab().eos();
        let mut finished = Vec::new();
        for beam in &self.history {
            for hyp in beam {
                let lp = transducer_step(self.model, &hyp.tokens, &a.memory, total)?;
                let lm_lp = self.lm_log_probs(&hyp.tokens)?;
                let state = grow_horizon(&hyp.ctc_state, &a.posterior, total)?;
                let s_ctc = prefix_score_eos(&state, total)?;
                let s_lst = hyp.s_lst + lp[eos];
                let s_lm = hyp.s_lm + lm_lp.as_ref().map_or(0.0, |l| l[eos]);
                finished.push(Hypothesis {
                    tokens: hyp.tokens.clone(),
                    s_lst,
                    s_ctc,
                    s_lm,
                    score: self.fused(combine(s_ctc, s_lst, self.config.beta), s_lm),
                    boundaries: hyp.boundaries.clone(),
                    complete: true,
                    ctc_state: Arc::new(state),
                });
            }
        }
        finished.sort_by(rank);
        Ok(finished)
    }
}

/// Decodes audio delivered as consecutive chunks.
pub fn decode_stream(
    model: &LsTransducer,
    chunks: &[Matrix],
    config: &DecodeConfig,
    lm: Option<&dyn NextTokenLm>,
) -> Result<DecodeResult> {
    let mut session = StreamingSession::new(model, config.clone(), lm)?;
    for chunk in chunks {
        session.push_chunk(chunk)?;
    }
    session.finish()
}

/// Decodes a whole utterance at once.
pub fn decode_offline(
    model: &LsTransducer,
    frames: &Matrix,
    config: &DecodeConfig,
    lm: Option<&dyn NextTokenLm>,
) -> Result<DecodeResult> {
    decode_stream(model, std::slice::from_ref(frames), config, lm)
}

/// Splits `frames` into consecutive chunks of `size` rows.
pub fn split_chunks(frames: &Matrix, size: usize) -> Result<Vec<Matrix>> {
    let size = size.max(1);
    (0..frames.rows()).step_by(size).map(|s| frames.slice_rows(s, (s + size).min(frames.rows()))).collect()
}

/// Transducer-only greedy search: follow the most probable token at each
/// label boundary up to the cap, then close the best prefix with `eos` at `T`.
pub fn greedy_decode(model: &LsTransducer, frames: &Matrix, max_labels: Option<usize>) -> Result<(Vec<usize>, f64)> {
    if frames.rows() == 0 {
        return Ok((Vec::new(), 0.0));
    }
    let enc = model.encode(frames, model.config().chunk_size)?;
    let alpha = crate::align::compute_fire_weights(&enc.e)?;
    let memory = model.aif_memory(&enc)?;
    let total = enc.frames();
    let cap = max_labels.unwrap_or(alpha.total().ceil() as usize + LABEL_CAP_SLACK);
    let vocab = model.vocab();
    let mut tokens = Vec::new();
    let mut s_lst = 0.0;
    let mut best: Option<(Vec<usize>, f64)> = None;
    loop {
        let eos_lp = transducer_step(model, &tokens, &memory, total)?[vocab.eos()];
        let closed = s_lst + eos_lp;
        if best.as_ref().is_none_or(|(_, s)| closed > *s) {
            best = Some((tokens.clone(), closed));
        }
        if tokens.len() >= cap {
            break;
        }
        let boundary = scan_boundary(alpha.as_slice(), tokens.len() + 1).unwrap_or(total).max(1);
        let lp = transducer_step(model, &tokens, &memory, boundary)?;
        let (q, v) = lp[..vocab.num_normal()]
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        tokens.push(q);
        s_lst += v;
    }
    Ok(best.unwrap())
}
