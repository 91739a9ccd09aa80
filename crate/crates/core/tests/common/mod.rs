#![allow(dead_code)]
//! Independent reference implementations used by integration and acceptance tests.

use std::collections::HashMap;

use labelsync::numcore::Matrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Random `T × (U+1)` CTC log-posterior (blank last), rows from a softmax of Gaussian logits.
pub fn random_log_posterior<R: Rng>(rng: &mut R, frames: usize, tokens: usize, spread: f64) -> Matrix {
    let normal = Normal::new(0.0, spread).unwrap();
    let mut m = Matrix::zeros(frames, tokens + 1);
    for t in 0..frames {
        let logits: Vec<f64> = (0..=tokens).map(|_| normal.sample(rng)).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        for (k, l) in logits.iter().enumerate() {
            m.set(t, k, (l - max) - z.ln());
        }
    }
    m
}

/// Probability of every collapsed label sequence, by enumerating all `(U+1)^T` frame paths.
pub struct CtcPathTable {
    pub exact: HashMap<Vec<usize>, f64>,
}

impl CtcPathTable {
    pub fn enumerate(log_probs: &Matrix, frames: usize) -> Self {
        let k = log_probs.cols();
        let blank = k - 1;
        let mut exact: HashMap<Vec<usize>, f64> = HashMap::new();
        let total = k.pow(frames as u32);
        let mut path = vec![0usize; frames];
        for code in 0..total {
            let mut c = code;
            for slot in path.iter_mut() {
                *slot = c % k;
                c /= k;
            }
            let mut p = 1.0;
            for (t, &sym) in path.iter().enumerate() {
                p *= log_probs.get(t, sym).exp();
            }
            let mut collapsed = Vec::new();
            let mut prev = None;
            for &sym in &path {
                if Some(sym) != prev && sym != blank {
                    collapsed.push(sym);
                }
                prev = Some(sym);
            }
            *exact.entry(collapsed).or_insert(0.0) += p;
        }
        Self { exact }
    }

    /// Total probability of label sequences starting with `prefix`.
    pub fn prefix_prob(&self, prefix: &[usize]) -> f64 {
        self.exact.iter().filter(|(seq, _)| seq.starts_with(prefix)).map(|(_, p)| p).sum()
    }

    pub fn exact_prob(&self, seq: &[usize]) -> f64 {
        self.exact.get(seq).copied().unwrap_or(0.0)
    }
}

/// All sequences over `0..tokens` with length at most `max_len`, shortest first.
pub fn all_sequences(tokens: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for q in 0..tokens {
                let mut e: Vec<usize> = s.clone();
                e.push(q);
                next.push(e);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Relative error between a log-domain score and a reference probability.
pub fn log_score_rel_error(log_score: f64, reference_prob: f64) -> f64 {
    if reference_prob == 0.0 {
        return if log_score <= labelsync::ctc::NEG_SENTINEL { 0.0 } else { f64::INFINITY };
    }
    ((log_score - reference_prob.ln()).exp() - 1.0).abs()
}

/// Naive single-query attention: softmax(q·Kᵀ)·V written as explicit loops.
pub fn naive_attention(query: &[f64], keys: &Matrix, values: &Matrix, prefix: usize) -> Vec<f64> {
    let scores: Vec<f64> = (0..prefix).map(|t| (0..query.len()).map(|i| query[i] * keys.get(t, i)).sum()).collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = weights.iter().sum();
    (0..values.cols()).map(|c| (0..prefix).map(|t| weights[t] / z * values.get(t, c)).sum()).collect()
}

/// Second CIF implementation: tracks remaining threshold mass instead of accumulation.
pub struct CifOracle {
    pub labels: Vec<Vec<f64>>,
    pub fire_frames: Vec<usize>,
}

pub fn cif_oracle(weights: &[f64], content: &Matrix, tolerance: f64) -> CifOracle {
    let dim = content.cols();
    let mut labels = Vec::new();
    let mut fire_frames = Vec::new();
    let mut acc = 0.0f64;
    let mut sum = vec![0.0; dim];
    for t in 0..weights.len() {
        let mut w = weights[t];
        loop {
            let needed = 1.0 - acc;
            if acc + w < 1.0 - tolerance {
                break;
            }
            let used = if needed < w { needed } else { w };
            for c in 0..dim {
                sum[c] += used * content.get(t, c);
            }
            labels.push(sum.clone());
            sum = vec![0.0; dim];
            fire_frames.push(t + 1);
            w = if w - used > 0.0 { w - used } else { 0.0 };
            acc = 0.0;
        }
        if w > 0.0 {
            acc += w;
            for c in 0..dim {
                sum[c] += w * content.get(t, c);
            }
        }
    }
    CifOracle { labels, fire_frames }
}

/// Overlap form of CIF: frame `t` gives label `j` the length of
/// `[cum_{t-1}, cum_t] ∩ [j-1, j]`.
pub fn cif_overlap(weights: &[f64], content: &Matrix, labels: usize) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; content.cols()]; labels];
    let mut lo = 0.0;
    for t in 0..weights.len() {
        let hi = lo + weights[t];
        for (j, row) in out.iter_mut().enumerate() {
            let overlap = (hi.min((j + 1) as f64) - lo.max(j as f64)).max(0.0);
            for c in 0..content.cols() {
                row[c] += overlap * content.get(t, c);
            }
        }
        lo = hi;
    }
    out
}

/// Unit-cost edit distance split into (substitutions, deletions, insertions).
/// Among minimum-cost alignments the one with most substitutions wins, which
/// makes the split unique. Written recursively with memoisation.
pub fn edit_ops_oracle(reference: &[usize], hypothesis: &[usize]) -> (usize, usize, usize) {
    fn go(
        r: &[usize],
        h: &[usize],
        i: usize,
        j: usize,
        memo: &mut HashMap<(usize, usize), (usize, usize, usize)>,
    ) -> (usize, usize, usize) {
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let v = if i == r.len() {
            (0, 0, h.len() - j)
        } else if j == h.len() {
            (0, r.len() - i, 0)
        } else {
            // Lower key is better: fewest edits, then most substitutions.
            let cost = |c: (usize, usize, usize)| (c.0 + c.1 + c.2, usize::MAX - c.0);
            let mut best = {
                let (s, d, ins) = go(r, h, i + 1, j + 1, memo);
                (s + usize::from(r[i] != h[j]), d, ins)
            };
            let (s, d, ins) = go(r, h, i + 1, j, memo);
            if cost((s, d + 1, ins)) < cost(best) {
                best = (s, d + 1, ins);
            }
            let (s, d, ins) = go(r, h, i, j + 1, memo);
            if cost((s, d, ins + 1)) < cost(best) {
                best = (s, d, ins + 1);
            }
            best
        };
        memo.insert((i, j), v);
        v
    }
    go(reference, hypothesis, 0, 0, &mut HashMap::new())
}
