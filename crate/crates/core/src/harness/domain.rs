//! Synthetic text/acoustic domains.

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{bail, Result};
use crate::model::Vocabulary;
use crate::numcore::Matrix;

/// Number of tokens in the stock vocabulary.
pub const STOCK_TOKENS: usize = 20;
/// Frame width of the stock emissions.
pub const STOCK_FEAT_DIM: usize = 16;
/// Tokens `2c` and `2c + 1` share the emission vector of class `c`.
pub const STOCK_CLASSES: usize = STOCK_TOKENS / 2;
/// Per-class bit flipping the homophone spelling of the next token.
const SPELLING_FLIP: [bool; STOCK_CLASSES] = [true, false, true, true, false, false, true, false, false, true];

const EMISSION_SEED: u64 = 0x5eed_acc0;

/// Generative description of one domain over a shared vocabulary.
///
/// Row 0 of `transitions` is the distribution of the first token; row `1 + p`
/// is the distribution following token `p`. Columns are normal token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    pub name: String,
    pub vocab: Vocabulary,
    pub transitions: Matrix,
    pub min_len: usize,
    pub max_len: usize,
    /// Mean duration of each token in frames.
    pub durations: Vec<usize>,
    /// Durations are drawn uniformly from `mean ± jitter`.
    pub jitter: Vec<usize>,
    /// One row per token.
    pub emissions: Matrix,
    pub noise: f64,
}

impl DomainSpec {
    pub fn num_tokens(&self) -> usize {
        self.vocab.num_normal()
    }

    pub fn feat_dim(&self) -> usize {
        self.emissions.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let u = self.num_tokens();
        if self.transitions.shape() != (u + 1, u) {
            bail!(Dimension, "transition table is {:?}, expected ({}, {u})", self.transitions.shape(), u + 1);
        }
        if self.emissions.rows() != u || self.emissions.cols() == 0 {
            bail!(Dimension, "emission table is {:?} for {u} tokens", self.emissions.shape());
        }
        if self.durations.len() != u || self.jitter.len() != u {
            bail!(Dimension, "need one duration and jitter per token");
        }
        if let Some(i) = (0..u).find(|&i| self.jitter[i] >= self.durations[i]) {
            bail!(Degenerate, "token {i} could get a duration below one frame");
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            bail!(Config, "bad length range {}..={}", self.min_len, self.max_len);
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            bail!(Config, "noise level must be finite and nonnegative");
        }
        for r in 0..=u {
            let row = self.transitions.row(r);
            if row.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
                bail!(Degenerate, "transition row {r} has an invalid probability");
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                bail!(Degenerate, "transition row {r} sums to {total}");
            }
        }
        Ok(())
    }

    /// Source domain: the next acoustic class is uniform over classes other
    /// than the previous one; which member of the homophone pair is written
    /// follows the previous token's member, flipped by a per-class bit.
    pub fn stock_source() -> Self {
        Self::stock("source", stock_transitions(false, |_, _| 1.0))
    }

    /// Target domain: same acoustics, the opposite spelling rule and skewed
    /// class bigrams.
    pub fn stock_target() -> Self {
        let transitions = stock_transitions(true, |prev, class| {
            let follows = prev.is_some_and(|p| (p + 1) % STOCK_CLASSES == class);
            1.0 + 4.0 * f64::from(u8::from(follows)) + f64::from(u8::from(class < 3))
        });
        Self::stock("target", transitions)
    }

    fn stock(name: &str, transitions: Matrix) -> Self {
        Self {
            name: name.to_string(),
            vocab: Vocabulary::letters(STOCK_TOKENS),
            transitions,
            min_len: 4,
            max_len: 10,
            durations: vec![4; STOCK_TOKENS],
            jitter: vec![1; STOCK_TOKENS],
            emissions: stock_emissions(),
            noise: 0.3,
        }
    }

    /// Samples a token sequence; [`Self::sample`] draws the same tokens first.
    pub fn sample_tokens(&self, rng: &mut impl Rng) -> Result<Vec<usize>> {
        let len = rng.random_range(self.min_len..=self.max_len);
        let mut tokens = Vec::with_capacity(len);
        let mut row = 0;
        for _ in 0..len {
            let dist = WeightedIndex::new(self.transitions.row(row))
                .map_err(|e| crate::Error::Degenerate(format!("transition row {row}: {e}")))?;
            let t = dist.sample(rng);
            tokens.push(t);
            row = t + 1;
        }
        Ok(tokens)
    }

    /// Samples one utterance from `rng`.
    pub fn sample(&self, id: impl Into<String>, rng: &mut impl Rng) -> Result<SyntheticUtterance> {
        let tokens = self.sample_tokens(rng)?;
        let durations: Vec<usize> = tokens
            .iter()
            .map(|&t| rng.random_range(self.durations[t] - self.jitter[t]..=self.durations[t] + self.jitter[t]))
            .collect();
        let total: usize = durations.iter().sum();
        let mut frames = Matrix::zeros(total, self.feat_dim());
        let noise = Normal::new(0.0, self.noise).map_err(|e| crate::Error::Config(e.to_string()))?;
        let mut r = 0;
        for (&t, &d) in tokens.iter().zip(&durations) {
            for _ in 0..d {
                for (c, x) in frames.row_mut(r).iter_mut().enumerate() {
                    *x = self.emissions.get(t, c) + if self.noise > 0.0 { noise.sample(rng) } else { 0.0 };
                }
                r += 1;
            }
        }
        Ok(SyntheticUtterance { id: id.into(), tokens, durations, frames })
    }
}

/// Acoustic class of a stock token.
pub fn stock_class(token: usize) -> usize {
    token / 2
}

/// Pair member (0 or 1) the source domain writes after `prev`; `None` is the
/// sentence start.
fn source_member(prev: Option<usize>) -> usize {
    prev.map_or(0, |p| (p % 2) ^ usize::from(SPELLING_FLIP[stock_class(p)]))
}

fn stock_transitions(reversed: bool, weight: impl Fn(Option<usize>, usize) -> f64) -> Matrix {
    let mut table = Matrix::zeros(STOCK_TOKENS + 1, STOCK_TOKENS);
    for r in 0..=STOCK_TOKENS {
        let prev = r.checked_sub(1);
        let prev_class = prev.map(stock_class);
        let member = source_member(prev) ^ usize::from(reversed);
        let weights: Vec<f64> =
            (0..STOCK_CLASSES).map(|c| if Some(c) == prev_class { 0.0 } else { weight(prev_class, c) }).collect();
        let total: f64 = weights.iter().sum();
        for (c, w) in weights.iter().enumerate() {
            table.set(r, 2 * c + member, w / total);
        }
    }
    table
}

/// Fixed unit-norm class vectors scaled to length 2, shared by every stock domain.
fn stock_emissions() -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(EMISSION_SEED);
    let classes = Matrix::randn(STOCK_CLASSES, STOCK_FEAT_DIM, 1.0, &mut rng);
    let mut out = Matrix::zeros(STOCK_TOKENS, STOCK_FEAT_DIM);
    for t in 0..STOCK_TOKENS {
        let row = classes.row(stock_class(t));
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (o, v) in out.row_mut(t).iter_mut().zip(row) {
            *o = 2.0 * v / norm;
        }
    }
    out
}

/// One generated utterance with its frame-level alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticUtterance {
    pub id: String,
    pub tokens: Vec<usize>,
    /// Frames spent on each token.
    pub durations: Vec<usize>,
    pub frames: Matrix,
}

impl SyntheticUtterance {
    /// Exclusive end frame of every token.
    pub fn token_ends(&self) -> Vec<usize> {
        self.durations
            .iter()
            .scan(0, |acc, d| {
                *acc += d;
                Some(*acc)
            })
            .collect()
    }
}
