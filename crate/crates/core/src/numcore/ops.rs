//! Tape-free numeric kernels shared by the autodiff ops and by inference code.

use super::matrix::Matrix;
use crate::error::{bail, Result};

/// Logistic function, evaluated on the side that cannot overflow.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(exp(a) + exp(b))`, exact for `-inf` operands.
#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_row_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &Matrix) -> Result<Matrix> {
    if m.is_empty() {
        bail!(Dimension, "softmax of an empty {:?} matrix", m.shape());
    }
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        softmax_row_into(m.row(r), out.row_mut(r));
    }
    Ok(out)
}

pub fn log_softmax_rows(m: &Matrix) -> Result<Matrix> {
    if m.is_empty() {
        bail!(Dimension, "log-softmax of an empty {:?} matrix", m.shape());
    }
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        let lse = log_sum_exp(m.row(r));
        for (o, &v) in out.row_mut(r).iter_mut().zip(m.row(r)) {
            *o = v - lse;
        }
    }
    Ok(out)
}

/// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
pub fn cross_entropy(logits: &Matrix, targets: &[usize]) -> Result<f64> {
    Ok(cross_entropy_with_grad(logits, targets)?.0)
}

/// Loss value and its gradient with respect to the logits.
pub(crate) fn cross_entropy_with_grad(logits: &Matrix, targets: &[usize]) -> Result<(f64, Matrix)> {
    if logits.rows() != targets.len() {
        bail!(Dimension, "{} logit rows for {} targets", logits.rows(), targets.len());
    }
    if logits.is_empty() {
        bail!(Dimension, "cross-entropy over an empty matrix");
    }
    let v = logits.cols();
    if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
        bail!(Invalid, "target index {} outside vocabulary of {}", bad, v);
    }
    let n = targets.len() as f64;
    let mut grad = softmax_rows(logits)?;
    let mut loss = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        loss -= logits.get(r, t) - log_sum_exp(logits.row(r));
        let row = grad.row_mut(r);
        row[t] -= 1.0;
        row.iter_mut().for_each(|g| *g /= n);
    }
    Ok((loss / n, grad))
}

/// Tanh approximation of GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
