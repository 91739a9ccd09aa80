//! Parameter updates with global-norm gradient clipping.

use std::fmt;
use std::str::FromStr;

use crate::error::Error;
use crate::numcore::{Matrix, ParamStore};

/// Global gradient-norm ceiling.
pub const GRAD_CLIP: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            _ => Err(Error::Config(format!("unknown optimizer {s:?} (sgd | adam)"))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sgd => "sgd",
            Self::Adam => "adam",
        })
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub clip: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    steps: u32,
    moments: Vec<Option<(Matrix, Matrix)>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self { kind, lr, clip: GRAD_CLIP, beta1: 0.9, beta2: 0.999, eps: 1e-8, steps: 0, moments: Vec::new() }
    }

    pub fn sgd(lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(OptimizerKind::Adam, lr)
    }

    pub fn steps(&self) -> u32 {
        self.steps
    }

    /// Applies one update to every trainable parameter, then zeroes all gradients.
    /// Returns the gradient norm before clipping.
    pub fn step(&mut self, store: &mut ParamStore) -> f64 {
        let norm = store.grad_norm();
        let scale = if norm > self.clip { self.clip / norm } else { 1.0 };
        self.steps += 1;
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        let t = self.steps as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in p.value.as_mut_slice().iter_mut().zip(p.grad.as_slice()) {
                        *w -= self.lr * scale * g;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = self.moments[i].get_or_insert_with(|| {
                        (Matrix::zeros(p.value.rows(), p.value.cols()), Matrix::zeros(p.value.rows(), p.value.cols()))
                    });
                    let values = p.value.as_mut_slice().iter_mut();
                    let state = m.as_mut_slice().iter_mut().zip(v.as_mut_slice().iter_mut());
                    for ((w, &g), (m, v)) in values.zip(p.grad.as_slice()).zip(state) {
                        let g = g * scale;
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        *w -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                    }
                }
            }
        }
        store.zero_grad();
        norm
    }
}
