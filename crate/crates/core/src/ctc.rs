//! CTC loss and incremental prefix scoring.
//!
//! Posterior layout: `U` normal-token columns followed by one blank column.
//! The decoder's end-of-sentence symbol has no column here, so the CTC branch
//! assigns it zero probability by construction.
//!
//! Prefix scores are kept in the log domain. Impossible events are `-inf`
//! internally and surface as [`NEG_SENTINEL`] in [`PrefixScore`].

use std::fmt::Write as _;
use std::sync::Arc;

use crate::error::{bail, Result};
use crate::numcore::{log_add, log_sum_exp, Matrix, NodeId, Tape};

/// Finite stand-in for `log 0`.
pub const NEG_SENTINEL: f64 = -1e30;

/// Frame-level CTC log-posteriors, `T × (U+1)`, blank last.
#[derive(Debug, Clone, PartialEq)]
pub struct CtcPosterior {
    log_probs: Matrix,
}

impl CtcPosterior {
    /// Wraps log-probabilities, checking each row normalises within 1e-9.
    pub fn new(log_probs: Matrix) -> Result<Self> {
        if log_probs.cols() < 2 {
            bail!(Dimension, "posterior needs at least one token column plus blank, got {}", log_probs.cols());
        }
        for t in 0..log_probs.rows() {
            let total: f64 = log_probs.row(t).iter().map(|v| v.exp()).sum();
            if (total - 1.0).abs() > 1e-9 || log_probs.row(t).iter().any(|v| v.is_nan() || *v > 0.0) {
                bail!(Invalid, "posterior row {} sums to {} (expected 1, blank in last column)", t, total);
            }
        }
        Ok(Self { log_probs })
    }

    pub fn frames(&self) -> usize {
        self.log_probs.rows()
    }

    /// Number of normal tokens `U`.
    pub fn num_tokens(&self) -> usize {
        self.log_probs.cols() - 1
    }

    pub fn blank(&self) -> usize {
        self.log_probs.cols() - 1
    }

    pub fn log_probs(&self) -> &Matrix {
        &self.log_probs
    }

    #[inline]
    fn lp(&self, t: usize, k: usize) -> f64 {
        self.log_probs.get(t, k)
    }

    /// Appends frames from the same utterance.
    pub fn extend(&mut self, rows: &Matrix) -> Result<()> {
        if rows.cols() != self.log_probs.cols() {
            bail!(Dimension, "posterior extension has {} columns, expected {}", rows.cols(), self.log_probs.cols());
        }
        let grown = Matrix::vstack(&[&self.log_probs, rows])?;
        *self = CtcPosterior::new(grown)?;
        Ok(())
    }

    /// The first `frames` rows.
    pub fn truncated(&self, frames: usize) -> Result<CtcPosterior> {
        Ok(CtcPosterior { log_probs: self.log_probs.slice_rows(0, frames)? })
    }

    /// Text dump: header `T U`, then `T` lines of `U+1` log-probabilities.
    pub fn to_dump(&self) -> String {
        let mut out = format!("{} {}\n", self.frames(), self.num_tokens());
        for t in 0..self.frames() {
            let line: Vec<String> = self.log_probs.row(t).iter().map(|v| format!("{v:e}")).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }

    pub fn from_dump(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| crate::Error::Format("empty posterior dump".into()))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| crate::Error::Format(format!("bad header {header:?}: {e}")))?;
        let [frames, tokens] = dims[..] else {
            bail!(Format, "header must be `T U`, got {:?}", header);
        };
        let mut values = Vec::with_capacity(frames * (tokens + 1));
        for (t, line) in lines.enumerate() {
            let row: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| crate::Error::Format(format!("row {t}: {e}")))?;
            if row.len() != tokens + 1 {
                bail!(Format, "row {} has {} values, expected {}", t, row.len(), tokens + 1);
            }
            values.extend(row);
        }
        CtcPosterior::new(Matrix::from_vec(frames, tokens + 1, values)?)
    }
}

/// `S_ctc` of a hypothesis: a log probability, or the sentinel.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct PrefixScore(f64);

impl PrefixScore {
    pub fn from_log(value: f64) -> Self {
        if value.is_nan() || value <= NEG_SENTINEL {
            PrefixScore(NEG_SENTINEL)
        } else {
            PrefixScore(value)
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_impossible(self) -> bool {
        self.0 <= NEG_SENTINEL
    }
}

fn blank_interleaved(target: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &y in target {
        ext.push(y);
        ext.push(blank);
    }
    ext
}

fn check_target(target: &[usize], num_tokens: usize) -> Result<()> {
    if let Some(&bad) = target.iter().find(|&&y| y >= num_tokens) {
        bail!(Invalid, "CTC target token {} is not a normal token (blank = {}, eos has no CTC column)", bad, num_tokens);
    }
    Ok(())
}

/// Log forward variables over the blank-interleaved target, `T × (2L+1)`.
fn forward_vars(lp: &Matrix, ext: &[usize]) -> Vec<Vec<f64>> {
    let (frames, s_len) = (lp.rows(), ext.len());
    let mut alpha = vec![vec![f64::NEG_INFINITY; s_len]; frames];
    if frames == 0 {
        return alpha;
    }
    alpha[0][0] = lp.get(0, ext[0]);
    if s_len > 1 {
        alpha[0][1] = lp.get(0, ext[1]);
    }
    for t in 1..frames {
        for s in 0..s_len {
            let mut a = alpha[t - 1][s];
            if s >= 1 {
                a = log_add(a, alpha[t - 1][s - 1]);
            }
            if s >= 2 && ext[s] != ext[s - 2] {
                a = log_add(a, alpha[t - 1][s - 2]);
            }
            alpha[t][s] = if a == f64::NEG_INFINITY { a } else { a + lp.get(t, ext[s]) };
        }
    }
    alpha
}

/// Log backward variables excluding the emission at `t`.
fn backward_vars(lp: &Matrix, ext: &[usize]) -> Vec<Vec<f64>> {
    let (frames, s_len) = (lp.rows(), ext.len());
    let mut beta = vec![vec![f64::NEG_INFINITY; s_len]; frames];
    if frames == 0 {
        return beta;
    }
    beta[frames - 1][s_len - 1] = 0.0;
    if s_len > 1 {
        beta[frames - 1][s_len - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let step = |s2: usize| beta[t + 1][s2] + lp.get(t + 1, ext[s2]);
            let mut b = step(s);
            if s + 1 < s_len {
                b = log_add(b, step(s + 1));
            }
            if s + 2 < s_len && ext[s + 2] != ext[s] {
                b = log_add(b, step(s + 2));
            }
            beta[t][s] = b;
        }
    }
    beta
}

/// `log p(target | E)` by the forward algorithm; `-inf` when no path exists.
pub fn sequence_log_prob(posterior: &CtcPosterior, target: &[usize]) -> Result<f64> {
    check_target(target, posterior.num_tokens())?;
    let ext = blank_interleaved(target, posterior.blank());
    let frames = posterior.frames();
    if frames == 0 {
        return Ok(if target.is_empty() { 0.0 } else { f64::NEG_INFINITY });
    }
    let alpha = forward_vars(posterior.log_probs(), &ext);
    let last = &alpha[frames - 1];
    let s_len = ext.len();
    Ok(if s_len > 1 { log_add(last[s_len - 1], last[s_len - 2]) } else { last[0] })
}

/// Negative log-likelihood and its gradient with respect to the log-probabilities.
///
/// When no alignment exists the loss is `-NEG_SENTINEL` with a zero gradient.
pub fn ctc_loss_with_grad(log_probs: &Matrix, target: &[usize]) -> Result<(f64, Matrix)> {
    if log_probs.cols() < 2 {
        bail!(Dimension, "CTC needs token columns plus blank, got {} columns", log_probs.cols());
    }
    let blank = log_probs.cols() - 1;
    check_target(target, blank)?;
    let frames = log_probs.rows();
    let mut grad = Matrix::zeros(frames, log_probs.cols());
    if frames == 0 {
        return Ok((if target.is_empty() { 0.0 } else { -NEG_SENTINEL }, grad));
    }
    let ext = blank_interleaved(target, blank);
    let alpha = forward_vars(log_probs, &ext);
    let beta = backward_vars(log_probs, &ext);
    let s_len = ext.len();
    let last = &alpha[frames - 1];
    let log_p = if s_len > 1 { log_add(last[s_len - 1], last[s_len - 2]) } else { last[0] };
    if log_p == f64::NEG_INFINITY {
        return Ok((-NEG_SENTINEL, grad));
    }
    for t in 0..frames {
        for s in 0..s_len {
            let occ = alpha[t][s] + beta[t][s] - log_p;
            if occ > f64::NEG_INFINITY {
                let k = ext[s];
                grad.set(t, k, grad.get(t, k) - occ.exp());
            }
        }
    }
    Ok((-log_p, grad))
}

/// CTC negative log-likelihood of `target` given a posterior.
pub fn ctc_loss(posterior: &CtcPosterior, target: &[usize]) -> Result<f64> {
    Ok(ctc_loss_with_grad(posterior.log_probs(), target)?.0)
}

/// Differentiable CTC loss over a `T × (U+1)` log-probability node.
pub fn ctc_loss_node(tape: &mut Tape, log_probs: NodeId, target: &[usize]) -> Result<NodeId> {
    let (loss, grad) = ctc_loss_with_grad(tape.value(log_probs), target)?;
    tape.custom_loss(log_probs, loss, grad)
}

/// Forward variables of a prefix over frames `1..=horizon`.
///
/// `gamma_n[t]`/`gamma_b[t]` are the log probabilities that the first `t+1`
/// frames emit exactly this prefix with the last frame non-blank/blank.
#[derive(Debug, Clone)]
pub struct PrefixState {
    tokens: Vec<usize>,
    gamma_n: Vec<f64>,
    gamma_b: Vec<f64>,
    /// log of the total probability of label sequences having this prefix.
    prefix_log_prob: f64,
    parent: Option<Arc<PrefixState>>,
}

impl PrefixState {
    /// The empty prefix (start of sentence) over the first `horizon` frames.
    pub fn initial(posterior: &CtcPosterior, horizon: usize) -> Result<Self> {
        let mut s = PrefixState {
            tokens: Vec::new(),
            gamma_n: Vec::new(),
            gamma_b: Vec::new(),
            prefix_log_prob: 0.0,
            parent: None,
        };
        s.advance(posterior, horizon)?;
        Ok(s)
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn horizon(&self) -> usize {
        self.gamma_n.len()
    }

    pub fn gamma_n(&self) -> &[f64] {
        &self.gamma_n
    }

    pub fn gamma_b(&self) -> &[f64] {
        &self.gamma_b
    }

    /// `S_ctc` of this prefix at its horizon.
    pub fn prefix_score(&self) -> PrefixScore {
        PrefixScore::from_log(self.prefix_log_prob)
    }

    /// log probability that the frames so far emit exactly this prefix.
    pub fn exact_log_prob(&self) -> f64 {
        match self.horizon() {
            0 if self.tokens.is_empty() => 0.0,
            0 => f64::NEG_INFINITY,
            h => log_add(self.gamma_n[h - 1], self.gamma_b[h - 1]),
        }
    }

    /// Runs the recursion forward to `horizon`, growing ancestors as needed.
    fn advance(&mut self, posterior: &CtcPosterior, horizon: usize) -> Result<()> {
        if horizon > posterior.frames() {
            bail!(Invalid, "horizon {} beyond {} available frames", horizon, posterior.frames());
        }
        let start = self.horizon();
        if horizon < start {
            bail!(Invalid, "cannot shrink prefix horizon from {} to {}", start, horizon);
        }
        if horizon == start {
            return Ok(());
        }
        let blank = posterior.blank();
        match self.parent.as_mut() {
            None => {
                // Empty prefix: only all-blank paths.
                for t in start..horizon {
                    let prev = if t == 0 { 0.0 } else { self.gamma_b[t - 1] };
                    self.gamma_n.push(f64::NEG_INFINITY);
                    self.gamma_b.push(prev + posterior.lp(t, blank));
                }
            }
            Some(parent) => {
                if parent.horizon() < horizon {
                    let mut grown = (**parent).clone();
                    grown.advance(posterior, horizon)?;
                    *parent = Arc::new(grown);
                }
                let parent = Arc::clone(parent);
                let q = *self.tokens.last().expect("non-root prefix has a token");
                let repeat = parent.tokens.last() == Some(&q);
                let root = parent.tokens.is_empty();
                for t in start..horizon {
                    let emit = posterior.lp(t, q);
                    if t == 0 {
                        self.gamma_n.push(if root { emit } else { f64::NEG_INFINITY });
                        self.gamma_b.push(f64::NEG_INFINITY);
                        if root {
                            self.prefix_log_prob = emit;
                        }
                        continue;
                    }
                    let from_parent = if repeat {
                        parent.gamma_b[t - 1]
                    } else {
                        log_add(parent.gamma_b[t - 1], parent.gamma_n[t - 1])
                    };
                    let (n_prev, b_prev) = (self.gamma_n[t - 1], self.gamma_b[t - 1]);
                    self.gamma_n.push(add_emit(log_add(n_prev, from_parent), emit));
                    self.gamma_b.push(add_emit(log_add(b_prev, n_prev), posterior.lp(t, blank)));
                    self.prefix_log_prob = log_add(self.prefix_log_prob, add_emit(from_parent, emit));
                }
            }
        }
        Ok(())
    }
}

#[inline]
fn add_emit(log_mass: f64, emit: f64) -> f64 {
    if log_mass == f64::NEG_INFINITY {
        log_mass
    } else {
        log_mass + emit
    }
}

/// Extends prefix `g` by token `q` over the first `horizon` frames.
///
/// `g` is grown to `horizon` first if it lags behind; its own recursion is
/// reused rather than recomputed.
pub fn prefix_extend(g: &PrefixState, q: usize, posterior: &CtcPosterior, horizon: usize) -> Result<(PrefixState, PrefixScore)> {
    if q >= posterior.num_tokens() {
        bail!(Invalid, "cannot extend a CTC prefix with blank or non-CTC token {}", q);
    }
    let mut parent = g.clone();
    parent.advance(posterior, horizon)?;
    let mut tokens = parent.tokens.clone();
    tokens.push(q);
    let mut h = PrefixState {
        tokens,
        gamma_n: Vec::with_capacity(horizon),
        gamma_b: Vec::with_capacity(horizon),
        prefix_log_prob: f64::NEG_INFINITY,
        parent: Some(Arc::new(parent)),
    };
    h.advance(posterior, horizon)?;
    let score = h.prefix_score();
    Ok((h, score))
}

/// Advances a prefix state to a larger horizon; equal to recomputation from scratch.
pub fn grow_horizon(state: &PrefixState, posterior: &CtcPosterior, horizon: usize) -> Result<PrefixState> {
    let mut s = state.clone();
    s.advance(posterior, horizon)?;
    Ok(s)
}

/// CTC score of `g·[eos]` at the state's horizon `T_h` for an utterance of `total_frames`.
///
/// Before the whole utterance is read the end of sentence is impossible
/// for CTC; at `T_h = T` the score is the probability of exactly `g`.
pub fn prefix_score_eos(g: &PrefixState, total_frames: usize) -> Result<PrefixScore> {
    let horizon = g.horizon();
    if horizon > total_frames {
        bail!(Invalid, "horizon {} exceeds utterance length {}", horizon, total_frames);
    }
    if horizon < total_frames {
        return Ok(PrefixScore(NEG_SENTINEL));
    }
    Ok(PrefixScore::from_log(g.exact_log_prob()))
}

/// Convenience: `S_ctc` of a complete token sequence treated as a prefix.
pub fn prefix_score_of(tokens: &[usize], posterior: &CtcPosterior, horizon: usize) -> Result<PrefixScore> {
    let mut state = PrefixState::initial(posterior, horizon)?;
    let mut score = state.prefix_score();
    for &q in tokens {
        let (next, s) = prefix_extend(&state, q, posterior, horizon)?;
        state = next;
        score = s;
    }
    Ok(score)
}

/// Row-wise log-normalisation helper for building posteriors from raw scores.
pub fn posterior_from_logits(logits: &Matrix) -> Result<CtcPosterior> {
    let mut lp = logits.clone();
    for t in 0..lp.rows() {
        let lse = log_sum_exp(logits.row(t));
        lp.row_mut(t).iter_mut().for_each(|v| *v -= lse);
    }
    CtcPosterior::new(lp)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn post(rows: &[Vec<f64>]) -> CtcPosterior {
        let m = Matrix::from_rows(rows).unwrap().map(f64::ln);
        CtcPosterior::new(m).unwrap()
    }

    #[test]
    fn single_frame_loss_and_prefix() {
        let p = post(&[vec![0.6, 0.4]]);
        assert!((ctc_loss(&p, &[0]).unwrap() + 0.6f64.ln()).abs() < 1e-15);
        let root = PrefixState::initial(&p, 1).unwrap();
        let (h, s) = prefix_extend(&root, 0, &p, 1).unwrap();
        assert!((s.value() - 0.6f64.ln()).abs() < 1e-15);
        let eos = prefix_score_eos(&h, 1).unwrap();
        assert!((eos.value() - 0.6f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn repeat_needs_blank() {
        // p(a) = 1 everywhere (blank has zero probability), two frames.
        let m = Matrix::from_rows(&[vec![0.0, f64::NEG_INFINITY], vec![0.0, f64::NEG_INFINITY]]).unwrap();
        let p = CtcPosterior::new(m).unwrap();
        let root = PrefixState::initial(&p, 2).unwrap();
        let (a, _) = prefix_extend(&root, 0, &p, 2).unwrap();
        let (_, aa) = prefix_extend(&a, 0, &p, 2).unwrap();
        assert!(aa.is_impossible());
        assert_eq!(aa.value(), NEG_SENTINEL);
    }

    #[test]
    fn infeasible_target_hits_sentinel() {
        let p = post(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
        let (loss, grad) = ctc_loss_with_grad(p.log_probs(), &[0, 0]).unwrap();
        assert_eq!(loss, -NEG_SENTINEL);
        assert_eq!(grad, Matrix::zeros(2, 2));
    }

    #[test]
    fn rejects_blank_targets_and_extensions() {
        let p = post(&[vec![0.3, 0.3, 0.4]]);
        assert!(ctc_loss(&p, &[2]).is_err());
        let root = PrefixState::initial(&p, 1).unwrap();
        assert!(prefix_extend(&root, 2, &p, 1).is_err());
    }

    #[test]
    fn eos_suppressed_before_end() {
        let p = post(&[vec![0.6, 0.4], vec![0.2, 0.8], vec![0.5, 0.5]]);
        let root = PrefixState::initial(&p, 2).unwrap();
        let (h, _) = prefix_extend(&root, 0, &p, 2).unwrap();
        assert!(prefix_score_eos(&h, 3).unwrap().is_impossible());
        assert!(prefix_score_eos(&h, 1).is_err());
    }

    #[test]
    fn growing_by_zero_is_identity() {
        let p = post(&[vec![0.6, 0.4], vec![0.2, 0.8]]);
        let root = PrefixState::initial(&p, 1).unwrap();
        let (h, _) = prefix_extend(&root, 0, &p, 1).unwrap();
        let same = grow_horizon(&h, &p, 1).unwrap();
        assert_eq!(same.gamma_n(), h.gamma_n());
        assert_eq!(same.gamma_b(), h.gamma_b());
        assert!(grow_horizon(&same, &p, 0).is_err());
    }

    #[test]
    fn dump_round_trip() {
        let p = post(&[vec![0.6, 0.1, 0.3], vec![0.2, 0.3, 0.5]]);
        let back = CtcPosterior::from_dump(&p.to_dump()).unwrap();
        assert_eq!(back, p);
        assert!(CtcPosterior::from_dump("2\n").is_err());
        assert!(CtcPosterior::from_dump("1 1\n0.0 0.0\n").is_err());
    }
}
