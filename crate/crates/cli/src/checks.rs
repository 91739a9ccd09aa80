//! Self-checks exposed on the command line.

use std::collections::HashMap;
use std::fmt;

use anyhow::{ensure, Result};
use labelsync::ctc::{prefix_score_eos, prefix_score_of, CtcPosterior, PrefixState};
use labelsync::model::{Example, LsTransducer, ModelConfig, Vocabulary};
use labelsync::numcore::{grad_check, GradCheckConfig, GradCheckReport, Matrix, ParamStore, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Relative tolerance of CTC scores against enumeration.
pub const ORACLE_TOLERANCE: f64 = 1e-9;
/// Absolute tolerance of the final eos score against the offline sequence score.
pub const EOS_TOLERANCE: f64 = 1e-12;

/// Checks the composite loss of a small random model on two random utterances.
pub fn full_loss_gradcheck(coords: usize, seed: u64) -> Result<GradCheckReport> {
    let config = ModelConfig {
        enc_dim: 8,
        enc_ffn: 12,
        content_dim: 6,
        pred_dim: 6,
        pred_layers: 2,
        pred_ffn: 10,
        tap_layer: 1,
        chunk_size: 3,
        ..ModelConfig::toy(Vocabulary::letters(4), 5)
    };
    let model = LsTransducer::new(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let f1 = Matrix::randn(8, 5, 1.0, &mut rng);
    let f2 = Matrix::randn(6, 5, 1.0, &mut rng);
    let (t1, t2) = ([1usize, 0, 3], [2usize, 2]);
    let mut store: ParamStore = model.store().clone();
    let loss_fn = |s: &ParamStore, tape: &mut Tape| {
        let mut m = model.clone();
        *m.store_mut() = s.clone();
        let batch = [Example { frames: &f1, tokens: &t1 }, Example { frames: &f2, tokens: &t2 }];
        Ok(m.forward_training(tape, &batch, 0.5, 0.05)?.total)
    };
    let cfg = GradCheckConfig { total_coords: Some(coords), seed, ..GradCheckConfig::default() };
    Ok(grad_check(&mut store, loss_fn, &cfg)?)
}

#[derive(Debug, Default)]
pub struct OracleSummary {
    pub instances: usize,
    pub scores_checked: usize,
    pub max_rel_error: f64,
    pub max_eos_error: f64,
    /// Early eos scores that were not the impossible sentinel.
    pub eos_rule_violations: usize,
}

impl OracleSummary {
    pub fn passed(&self) -> bool {
        self.max_rel_error < ORACLE_TOLERANCE && self.max_eos_error < EOS_TOLERANCE && self.eos_rule_violations == 0
    }

    fn merge(&mut self, other: OracleSummary) {
        self.instances += other.instances;
        self.scores_checked += other.scores_checked;
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.max_eos_error = self.max_eos_error.max(other.max_eos_error);
        self.eos_rule_violations += other.eos_rule_violations;
    }
}

impl fmt::Display for OracleSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} instances, {} scores, max relative error {:.3e}, max eos error {:.3e}, {} early eos violations",
            if self.passed() { "PASS" } else { "FAIL" },
            self.instances,
            self.scores_checked,
            self.max_rel_error,
            self.max_eos_error,
            self.eos_rule_violations
        )
    }
}

/// Probability of each collapsed label sequence over the first `frames` rows.
fn enumerate_paths(log_probs: &Matrix, frames: usize) -> HashMap<Vec<usize>, f64> {
    let k = log_probs.cols();
    let blank = k - 1;
    let mut out = HashMap::new();
    let mut path = vec![0usize; frames];
    loop {
        let p: f64 = path.iter().enumerate().map(|(t, &s)| log_probs.get(t, s)).sum::<f64>().exp();
        let mut seq = Vec::new();
        let mut prev = None;
        for &s in &path {
            if s != blank && Some(s) != prev {
                seq.push(s);
            }
            prev = Some(s);
        }
        *out.entry(seq).or_insert(0.0) += p;
        // Odometer increment.
        let mut i = 0;
        while i < frames && path[i] == k - 1 {
            path[i] = 0;
            i += 1;
        }
        if i == frames {
            return out;
        }
        path[i] += 1;
    }
}

fn rel_error(log_score: f64, prob: f64) -> f64 {
    if prob == 0.0 {
        return if log_score <= labelsync::ctc::NEG_SENTINEL { 0.0 } else { f64::INFINITY };
    }
    ((log_score - prob.ln()).exp() - 1.0).abs()
}

/// Checks every prefix up to length U at every horizon, and the eos rule.
pub fn oracle_check(posterior: &CtcPosterior) -> Result<OracleSummary> {
    let lp = posterior.log_probs();
    let (frames, tokens) = (posterior.frames(), posterior.num_tokens());
    ensure!(frames <= 8 && tokens <= 4, "enumeration is limited to T <= 8 and U <= 4");
    let mut sequences = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..tokens.max(1) {
        let mut next = Vec::new();
        for s in &frontier {
            for q in 0..tokens {
                let mut e: Vec<usize> = s.clone();
                e.push(q);
                next.push(e);
            }
        }
        sequences.extend(next.iter().cloned());
        frontier = next;
    }
    let mut summary = OracleSummary { instances: 1, ..OracleSummary::default() };
    let full = enumerate_paths(lp, frames);
    for h in 1..=frames {
        let table = enumerate_paths(lp, h);
        for seq in sequences.iter().filter(|s| !s.is_empty()) {
            let expected: f64 = table.iter().filter(|(k, _)| k.starts_with(seq)).map(|(_, p)| p).sum();
            let score = prefix_score_of(seq, posterior, h)?;
            summary.max_rel_error = summary.max_rel_error.max(rel_error(score.value(), expected));
            summary.scores_checked += 1;
        }
    }
    for seq in &sequences {
        for h in 0..=frames {
            let mut state = PrefixState::initial(posterior, h)?;
            for &q in seq {
                state = labelsync::ctc::prefix_extend(&state, q, posterior, h)?.0;
            }
            let eos = prefix_score_eos(&state, frames)?;
            if h < frames {
                summary.eos_rule_violations += usize::from(!eos.is_impossible());
            } else {
                let exact = full.get(seq).copied().unwrap_or(0.0);
                if exact > 0.0 {
                    summary.max_eos_error = summary.max_eos_error.max((eos.value() - exact.ln()).abs());
                }
            }
        }
    }
    Ok(summary)
}

pub fn oracle_check_dump(text: &str) -> Result<OracleSummary> {
    oracle_check(&CtcPosterior::from_dump(text)?)
}

/// Random instances with `T ≤ 6` and `U ≤ 3`.
pub fn oracle_check_random(instances: usize, seed: u64) -> Result<OracleSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut summary = OracleSummary::default();
    for _ in 0..instances {
        let frames = rng.random_range(1..=6);
        let tokens = rng.random_range(1..=3);
        let logits = Matrix::randn(frames, tokens + 1, 2.0, &mut rng);
        let posterior = labelsync::ctc::posterior_from_logits(&logits)?;
        summary.merge(oracle_check(&posterior)?);
    }
    Ok(summary)
}
