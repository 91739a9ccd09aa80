//! Word error rate and emission latency.

use std::collections::HashMap;

use serde::Serialize;

use crate::error::{bail, Result};

/// A token sequence with optional per-token frame times.
///
/// For references `times` are the true token end frames; for hypotheses they
/// are the decoder boundaries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transcript {
    pub id: String,
    pub tokens: Vec<usize>,
    pub times: Option<Vec<usize>>,
}

impl Transcript {
    pub fn new(id: impl Into<String>, tokens: Vec<usize>) -> Self {
        Self { id: id.into(), tokens, times: None }
    }

    pub fn with_times(id: impl Into<String>, tokens: Vec<usize>, times: Vec<usize>) -> Self {
        Self { id: id.into(), tokens, times: Some(times) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
}

impl EditCounts {
    pub fn total(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Latency {
    /// Matched tokens that contributed.
    pub count: usize,
    /// Mean of `T_i - true_end_i` in frames.
    pub mean: f64,
    pub min: i64,
    pub max: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub wer: f64,
    #[serde(flatten)]
    pub edits: EditCounts,
    pub reference_tokens: usize,
    pub utterances: usize,
    pub sentence_errors: usize,
    /// References without a hypothesis, scored as all deletions.
    pub missing: Vec<String>,
    pub latency: Option<Latency>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Op {
    Match,
    Sub,
    Del,
    Ins,
}

/// Minimum-edit alignment with unit costs. Among equally short alignments the
/// one with the most substitutions wins; remaining ties prefer match/sub, then
/// deletion, then insertion.
fn align(reference: &[usize], hypothesis: &[usize]) -> Vec<Op> {
    let (n, m) = (reference.len(), hypothesis.len());
    // cost[i][j] = (edits, -subs) of aligning the suffixes r[i..] and h[j..].
    let mut cost = vec![vec![(0usize, 0isize); m + 1]; n + 1];
    for i in (0..=n).rev() {
        for j in (0..=m).rev() {
            cost[i][j] = if i == n {
                (m - j, 0)
            } else if j == m {
                (n - i, 0)
            } else {
                let sub = reference[i] != hypothesis[j];
                let diag = cost[i + 1][j + 1];
                let diag = (diag.0 + usize::from(sub), diag.1 - isize::from(sub));
                let del = (cost[i + 1][j].0 + 1, cost[i + 1][j].1);
                let ins = (cost[i][j + 1].0 + 1, cost[i][j + 1].1);
                diag.min(del).min(ins)
            };
        }
    }
    let (mut i, mut j, mut ops) = (0, 0, Vec::with_capacity(n.max(m)));
    while i < n || j < m {
        let here = cost[i][j];
        if i < n && j < m {
            let sub = reference[i] != hypothesis[j];
            let d = cost[i + 1][j + 1];
            if (d.0 + usize::from(sub), d.1 - isize::from(sub)) == here {
                ops.push(if sub { Op::Sub } else { Op::Match });
                i += 1;
                j += 1;
                continue;
            }
        }
        if i < n && (cost[i + 1][j].0 + 1, cost[i + 1][j].1) == here {
            ops.push(Op::Del);
            i += 1;
        } else {
            ops.push(Op::Ins);
            j += 1;
        }
    }
    ops
}

/// Substitution, deletion and insertion counts of the best alignment.
pub fn edit_counts(reference: &[usize], hypothesis: &[usize]) -> EditCounts {
    let mut c = EditCounts::default();
    for op in align(reference, hypothesis) {
        match op {
            Op::Sub => c.substitutions += 1,
            Op::Del => c.deletions += 1,
            Op::Ins => c.insertions += 1,
            Op::Match => {}
        }
    }
    c
}

/// Scores hypotheses against references by utterance id.
///
/// Latency is gathered over correctly recognised tokens when both sides
/// carry times.
pub fn eval_wer(references: &[Transcript], hypotheses: &[Transcript]) -> Result<Metrics> {
    let mut by_id: HashMap<&str, &Transcript> = HashMap::with_capacity(hypotheses.len());
    for h in hypotheses {
        if by_id.insert(h.id.as_str(), h).is_some() {
            bail!(Invalid, "duplicate hypothesis for {:?}", h.id);
        }
    }
    let mut edits = EditCounts::default();
    let (mut reference_tokens, mut sentence_errors) = (0, 0);
    let mut missing = Vec::new();
    let mut lags: Vec<i64> = Vec::new();
    for r in references {
        reference_tokens += r.tokens.len();
        let Some(h) = by_id.remove(r.id.as_str()) else {
            missing.push(r.id.clone());
            edits.deletions += r.tokens.len();
            sentence_errors += 1;
            continue;
        };
        let ops = align(&r.tokens, &h.tokens);
        let (mut i, mut j, mut wrong) = (0, 0, false);
        for op in ops {
            match op {
                Op::Match => {
                    if let (Some(rt), Some(ht)) = (&r.times, &h.times) {
                        lags.push(ht[j] as i64 - rt[i] as i64);
                    }
                }
                Op::Sub => edits.substitutions += 1,
                Op::Del => edits.deletions += 1,
                Op::Ins => edits.insertions += 1,
            }
            wrong |= op != Op::Match;
            i += usize::from(op != Op::Ins);
            j += usize::from(op != Op::Del);
        }
        sentence_errors += usize::from(wrong);
    }
    if let Some(extra) = by_id.keys().min() {
        bail!(Invalid, "hypothesis {extra:?} has no reference");
    }
    if reference_tokens == 0 {
        bail!(Invalid, "references contain no tokens");
    }
    let latency = (!lags.is_empty()).then(|| Latency {
        count: lags.len(),
        mean: lags.iter().sum::<i64>() as f64 / lags.len() as f64,
        min: *lags.iter().min().expect("nonempty"),
        max: *lags.iter().max().expect("nonempty"),
    });
    Ok(Metrics {
        wer: edits.total() as f64 / reference_tokens as f64,
        edits,
        reference_tokens,
        utterances: references.len(),
        sentence_errors,
        missing,
        latency,
    })
}
