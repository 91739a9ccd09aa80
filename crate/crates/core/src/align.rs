//! Integrate-and-fire alignment.
//!
//! [`cif_integrate_fire`] is the classic sequential CIF scan (weighted sums,
//! weight splitting at the threshold). The AIF variant used by the transducer
//! only takes *boundaries* from the accumulated weights and extracts each
//! label representation by attention over the encoder prefix `1..=T_j`
//! ([`AifAttention`]).

use crate::error::{bail, Result};
use crate::numcore::{sigmoid, Matrix, NodeId, ParamId, ParamStore, Tape};

/// Fire weights are clamped to `[ALPHA_CLAMP, 1 - ALPHA_CLAMP]`.
pub const ALPHA_CLAMP: f64 = 1e-12;

/// Slack on the CIF firing threshold so exactly scaled weights fire their last label.
pub const CIF_TOLERANCE: f64 = 1e-9;

/// Per-frame fire weights `α_t`, each in the open interval (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct FireWeights {
    alpha: Vec<f64>,
}

impl FireWeights {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if let Some(bad) = alpha.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
            bail!(Invalid, "fire weight {} outside (0, 1)", bad);
        }
        Ok(Self { alpha })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.alpha
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.alpha.iter().sum()
    }

    /// Right boundary `T_j` (1-based) of label `j`.
    pub fn boundary(&self, j: usize) -> Result<usize> {
        aif_locate_boundary(&self.alpha, j)
    }

    pub fn boundary_table(&self, labels: usize) -> BoundaryTable {
        BoundaryTable::from_weights(&self.alpha, labels)
    }
}

impl AsRef<[f64]> for FireWeights {
    fn as_ref(&self) -> &[f64] {
        &self.alpha
    }
}

/// Fire weights from the last encoder column: `α_t = sigmoid(e_{t,d})`.
pub fn compute_fire_weights(encoder_states: &Matrix) -> Result<FireWeights> {
    let d = encoder_states.cols();
    if d < 2 {
        bail!(Config, "encoder dimension {} < 2: need content columns plus the weight channel", d);
    }
    let alpha = (0..encoder_states.rows())
        .map(|t| sigmoid(encoder_states.get(t, d - 1)).clamp(ALPHA_CLAMP, 1.0 - ALPHA_CLAMP))
        .collect();
    Ok(FireWeights { alpha })
}

/// Differentiable fire weights as a `T × 1` node.
pub fn fire_weights_node(tape: &mut Tape, encoder_states: NodeId) -> Result<NodeId> {
    let d = tape.value(encoder_states).cols();
    if d < 2 {
        bail!(Config, "encoder dimension {} < 2: need content columns plus the weight channel", d);
    }
    let channel = tape.slice_cols(encoder_states, d - 1, d)?;
    Ok(tape.sigmoid(channel, ALPHA_CLAMP))
}

/// Content columns `1..d-1` of the encoder output.
pub fn content_node(tape: &mut Tape, encoder_states: NodeId) -> Result<NodeId> {
    let d = tape.value(encoder_states).cols();
    if d < 2 {
        bail!(Config, "encoder dimension {} < 2", d);
    }
    tape.slice_cols(encoder_states, 0, d - 1)
}

/// Weights rescaled so they sum to the target length.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledWeights {
    pub alpha_hat: Vec<f64>,
    pub target_len: usize,
}

/// `α̂_t = α_t · L / Σα`.
pub fn cif_scale(weights: impl AsRef<[f64]>, target_len: usize) -> Result<ScaledWeights> {
    let alpha = weights.as_ref();
    if target_len == 0 {
        bail!(Invalid, "scaling target length must be at least 1");
    }
    let total: f64 = alpha.iter().sum();
    if total <= 0.0 {
        bail!(Degenerate, "cannot scale fire weights summing to {}", total);
    }
    let factor = target_len as f64 / total;
    Ok(ScaledWeights { alpha_hat: alpha.iter().map(|a| a * factor).collect(), target_len })
}

/// Treatment of the accumulated weight left over after the last firing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PartialLabel {
    #[default]
    Discard,
    Emit,
}

/// Output of the sequential CIF scan.
#[derive(Debug, Clone, PartialEq)]
pub struct CifOutput {
    /// `c_j` rows.
    pub encoding: LabelEncoding,
    /// 1-based frame at which each label fired.
    pub fire_frames: Vec<usize>,
    /// Per label, the `(frame, weight)` contributions, frames 1-based.
    pub contributions: Vec<Vec<(usize, f64)>>,
}

/// Label-level acoustic representations, one row per label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelEncoding {
    pub c: Matrix,
}

impl LabelEncoding {
    pub fn labels(&self) -> usize {
        self.c.rows()
    }
}

/// Sequential integrate-and-fire over nonnegative weights.
///
/// When the accumulation reaches 1.0 the current frame's weight is split:
/// one part completes the label, the remainder seeds the next one. A weight
/// above 1.0 (possible after scaling) fires repeatedly from the same frame.
pub fn cif_integrate_fire(weights: &[f64], content: &Matrix, partial: PartialLabel) -> Result<CifOutput> {
    if weights.len() != content.rows() {
        bail!(Dimension, "{} weights for {} frames", weights.len(), content.rows());
    }
    if let Some(bad) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
        bail!(Invalid, "CIF weights must be nonnegative and finite, got {}", bad);
    }
    let dim = content.cols();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut fire_frames = Vec::new();
    let mut contributions: Vec<Vec<(usize, f64)>> = Vec::new();

    let mut acc = 0.0;
    let mut current = vec![0.0; dim];
    let mut parts: Vec<(usize, f64)> = Vec::new();

    for (t, &w) in weights.iter().enumerate() {
        let frame = content.row(t);
        let mut left = w;
        while acc + left >= 1.0 - CIF_TOLERANCE {
            let part = (1.0 - acc).min(left);
            for (c, &e) in current.iter_mut().zip(frame) {
                *c += part * e;
            }
            parts.push((t + 1, part));
            rows.push(std::mem::replace(&mut current, vec![0.0; dim]));
            contributions.push(std::mem::take(&mut parts));
            fire_frames.push(t + 1);
            left = (left - part).max(0.0);
            acc = 0.0;
        }
        if left > 0.0 {
            acc += left;
            for (c, &e) in current.iter_mut().zip(frame) {
                *c += left * e;
            }
            parts.push((t + 1, left));
        }
    }
    if partial == PartialLabel::Emit && acc > CIF_TOLERANCE {
        rows.push(current);
        contributions.push(parts);
        fire_frames.push(weights.len());
    }
    let c = if rows.is_empty() { Matrix::zeros(0, dim) } else { Matrix::from_rows(&rows)? };
    Ok(CifOutput { encoding: LabelEncoding { c }, fire_frames, contributions })
}

/// `|Σα − L|`.
pub fn quantity_loss(weights: impl AsRef<[f64]>, target_len: usize) -> f64 {
    (weights.as_ref().iter().sum::<f64>() - target_len as f64).abs()
}

/// Differentiable quantity loss over a `T × 1` weight node.
pub fn quantity_loss_node(tape: &mut Tape, alpha: NodeId, target_len: usize) -> Result<NodeId> {
    let total = tape.sum_all(alpha);
    let len = tape.leaf(Matrix::scalar(target_len as f64));
    let diff = tape.linear_combination(&[(total, 1.0), (len, -1.0)])?;
    Ok(tape.abs(diff))
}

/// Right boundary `T_j` (1-based): `T_j + 1` is the first frame whose
/// cumulative weight strictly exceeds `j`; `T` when none does.
pub fn aif_locate_boundary(alpha: &[f64], j: usize) -> Result<usize> {
    if j == 0 {
        bail!(Invalid, "label index starts at 1");
    }
    Ok(scan_boundary(alpha, j).unwrap_or(alpha.len()))
}

/// Boundary of label `j` if it is already determined by `alpha`, else `None`.
pub fn scan_boundary(alpha: &[f64], j: usize) -> Option<usize> {
    let threshold = j as f64;
    let mut cum = 0.0;
    for (t, &a) in alpha.iter().enumerate() {
        cum += a;
        if cum > threshold {
            return Some(t);
        }
    }
    None
}

/// Per-label right boundaries `T_1..T_L`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoundaryTable {
    bounds: Vec<usize>,
}

impl BoundaryTable {
    pub fn from_weights(alpha: &[f64], labels: usize) -> Self {
        let frames = alpha.len();
        let mut bounds = Vec::with_capacity(labels);
        let mut cum = 0.0;
        let mut t = 0;
        for j in 1..=labels {
            let threshold = j as f64;
            while t < frames && cum <= threshold {
                cum += alpha[t];
                t += 1;
            }
            // `t` frames consumed; the last one pushed the sum past j.
            bounds.push(if cum > threshold { t - 1 } else { frames });
        }
        Self { bounds }
    }

    pub fn new(bounds: Vec<usize>, frames: usize) -> Result<Self> {
        for w in bounds.windows(2) {
            if w[0] > w[1] {
                bail!(Invalid, "boundaries must be nondecreasing: {:?}", bounds);
            }
        }
        if let Some(&b) = bounds.iter().find(|&&b| b == 0 || b > frames) {
            bail!(Invalid, "boundary {} outside 1..={}", b, frames);
        }
        Ok(Self { bounds })
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.bounds
    }

    pub fn len(&self) -> usize {
        self.bounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bounds.is_empty()
    }
}

/// Dot-product attention of label queries over the FC-mapped encoder prefix.
#[derive(Debug, Clone, Copy)]
pub struct AifAttention {
    pub key_w: ParamId,
    pub key_b: ParamId,
    /// Separate value projection; `None` shares the key FC.
    pub value: Option<(ParamId, ParamId)>,
}

impl AifAttention {
    /// Registers the FC weights mapping content `content_dim` to `query_dim`.
    pub fn register<R: rand::Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        content_dim: usize,
        query_dim: usize,
        separate_values: bool,
        rng: &mut R,
    ) -> Self {
        let std = (1.0 / content_dim as f64).sqrt();
        let key_w = store.add(format!("{prefix}.fc.w"), Matrix::randn(content_dim, query_dim, std, rng));
        let key_b = store.add(format!("{prefix}.fc.b"), Matrix::zeros(1, query_dim));
        let value = separate_values.then(|| {
            (
                store.add(format!("{prefix}.fc_v.w"), Matrix::randn(content_dim, query_dim, std, rng)),
                store.add(format!("{prefix}.fc_v.b"), Matrix::zeros(1, query_dim)),
            )
        });
        Self { key_w, key_b, value }
    }

    /// `(keys, values)` for the whole content matrix; identical nodes when shared.
    pub fn project(&self, tape: &mut Tape, store: &ParamStore, content: NodeId) -> Result<(NodeId, NodeId)> {
        let keys = fc(tape, store, content, self.key_w, self.key_b)?;
        let values = match self.value {
            Some((w, b)) => fc(tape, store, content, w, b)?,
            None => keys,
        };
        Ok((keys, values))
    }
}

pub(crate) fn fc(tape: &mut Tape, store: &ParamStore, x: NodeId, w: ParamId, b: ParamId) -> Result<NodeId> {
    let wn = tape.param(store, w);
    let bn = tape.param(store, b);
    let xw = tape.matmul(x, wn)?;
    tape.add_row(xw, bn)
}

/// `c_j = softmax(q · K_{1:T_j}ᵀ) · V_{1:T_j}` for one `1 × d'` query.
pub fn aif_extract(tape: &mut Tape, query: NodeId, keys: NodeId, values: NodeId, boundary: usize) -> Result<NodeId> {
    if boundary == 0 {
        bail!(Invalid, "AIF prefix is empty (T_j = 0)");
    }
    let frames = tape.value(keys).rows();
    if boundary > frames {
        bail!(Invalid, "boundary {} beyond {} encoder frames", boundary, frames);
    }
    let k = tape.slice_rows(keys, 0, boundary)?;
    let v = if keys == values { k } else { tape.slice_rows(values, 0, boundary)? };
    let scores = tape.matmul_bt(query, k)?;
    let attn = tape.softmax_rows(scores)?;
    tape.matmul(attn, v)
}

/// Additive mask letting row `j` see frames `1..=T_j` only.
pub fn boundary_mask(bounds: &BoundaryTable, frames: usize) -> Matrix {
    Matrix::from_fn(bounds.len(), frames, |j, t| if t < bounds.as_slice()[j] { 0.0 } else { crate::ctc::NEG_SENTINEL })
}

/// All label representations at once from teacher-forced queries.
pub fn aif_extract_parallel(
    tape: &mut Tape,
    queries: NodeId,
    keys: NodeId,
    values: NodeId,
    bounds: &BoundaryTable,
) -> Result<NodeId> {
    let labels = tape.value(queries).rows();
    if bounds.len() != labels {
        bail!(Dimension, "{} boundaries for {} queries", bounds.len(), labels);
    }
    let frames = tape.value(keys).rows();
    if let Some(&b) = bounds.as_slice().iter().find(|&&b| b == 0 || b > frames) {
        bail!(Invalid, "boundary {} outside 1..={}", b, frames);
    }
    let scores = tape.matmul_bt(queries, keys)?;
    let attn = tape.softmax_rows_masked(scores, &boundary_mask(bounds, frames))?;
    tape.matmul(attn, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fire_weights_from_last_column() {
        let e = Matrix::from_rows(&[vec![1.0, 0.0], vec![-3.0, 0.0]]).unwrap();
        assert_eq!(compute_fire_weights(&e).unwrap().as_slice(), &[0.5, 0.5]);
        let e = Matrix::from_rows(&[vec![0.0, -1e6], vec![0.0, 1e6]]).unwrap();
        let a = compute_fire_weights(&e).unwrap();
        assert!(a.as_slice()[0] > 0.0 && a.as_slice()[0] < 1e-9);
        assert!(a.as_slice()[1] < 1.0 && a.as_slice()[1] > 1.0 - 1e-9);
        assert!(compute_fire_weights(&Matrix::zeros(3, 1)).is_err());
    }

    #[test]
    fn exact_threshold_fires_with_zero_remainder() {
        let e = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let out = cif_integrate_fire(&[1.0, 1.0], &e, PartialLabel::Emit).unwrap();
        assert_eq!(out.encoding.c, e);
        assert_eq!(out.fire_frames, vec![1, 2]);
    }

    #[test]
    fn partial_label_modes() {
        let e = Matrix::from_rows(&[vec![1.0], vec![1.0], vec![1.0]]).unwrap();
        let w = [0.6, 0.6, 0.3];
        let discard = cif_integrate_fire(&w, &e, PartialLabel::Discard).unwrap();
        assert_eq!(discard.encoding.labels(), 1);
        let emit = cif_integrate_fire(&w, &e, PartialLabel::Emit).unwrap();
        assert_eq!(emit.encoding.labels(), 2);
        assert!((emit.encoding.c.get(1, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_fires_is_legal() {
        let e = Matrix::zeros(2, 3);
        let out = cif_integrate_fire(&[0.1, 0.2], &e, PartialLabel::Discard).unwrap();
        assert_eq!(out.encoding.labels(), 0);
        assert!(cif_integrate_fire(&[-0.1, 0.2], &e, PartialLabel::Discard).is_err());
    }

    #[test]
    fn scaling_examples() {
        let s = cif_scale([0.5, 0.5, 1.0], 1).unwrap();
        assert_eq!(s.alpha_hat, vec![0.25, 0.25, 0.5]);
        let w = FireWeights::new(vec![0.25, 0.75, 0.5, 0.5]).unwrap();
        assert_eq!(cif_scale(&w, 2).unwrap().alpha_hat, w.as_slice());
        assert!(cif_scale([0.0, 0.0], 1).is_err());
        assert!(cif_scale(&w, 0).is_err());
    }

    #[test]
    fn quantity_loss_arithmetic() {
        let w = FireWeights::new(vec![0.9, 0.9, 0.9, 0.9, 0.7]).unwrap();
        assert!((quantity_loss(&w, 5) - 0.7).abs() < 1e-12);
        let w = FireWeights::new(vec![0.5, 0.5]).unwrap();
        assert_eq!(quantity_loss(&w, 1), 0.0);
    }

    #[test]
    fn boundary_fallback_and_strictness() {
        assert_eq!(aif_locate_boundary(&[0.3, 0.3], 1).unwrap(), 2);
        // Equality does not fire: cumulative reaches exactly 1 at frame 2.
        assert_eq!(aif_locate_boundary(&[0.5, 0.5, 0.5], 1).unwrap(), 2);
        assert_eq!(aif_locate_boundary(&[0.5, 0.5, 0.5], 2).unwrap(), 3);
        assert!(aif_locate_boundary(&[0.5], 0).is_err());
        assert_eq!(scan_boundary(&[0.3, 0.3], 1), None);
    }

    #[test]
    fn boundary_table_matches_per_label_scan() {
        let alpha = [0.2, 0.5, 0.4, 0.9, 0.1, 0.6, 0.7, 0.3];
        let table = BoundaryTable::from_weights(&alpha, 6);
        for j in 1..=6 {
            assert_eq!(table.as_slice()[j - 1], aif_locate_boundary(&alpha, j).unwrap());
        }
        assert!(BoundaryTable::new(vec![3, 2], 5).is_err());
        assert!(BoundaryTable::new(vec![0], 5).is_err());
    }

    #[test]
    fn single_frame_extraction_is_that_frame() {
        let mut tape = Tape::new();
        let q = tape.leaf(Matrix::row_vector(&[0.3, -1.2]));
        let kv = tape.leaf(Matrix::from_rows(&[vec![1.0, 2.0], vec![5.0, 6.0]]).unwrap());
        let c = aif_extract(&mut tape, q, kv, kv, 1).unwrap();
        assert_eq!(tape.value(c).as_slice(), &[1.0, 2.0]);
        assert!(aif_extract(&mut tape, q, kv, kv, 0).is_err());
    }
}
