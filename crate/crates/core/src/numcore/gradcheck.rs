use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{NodeId, ParamStore, Tape};
use crate::error::{bail, Result};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    /// Upper bound on sampled coordinates per parameter.
    pub max_coords_per_param: usize,
    /// Optional bound on coordinates across all parameters.
    pub total_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { epsilon: 1e-5, max_coords_per_param: 200, total_coords: None, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct CoordError {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    pub worst: Option<CoordError>,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval(store: &ParamStore, loss_fn: &impl Fn(&ParamStore, &mut Tape) -> Result<NodeId>) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = loss_fn(store, &mut tape)?;
    Ok(tape.value(loss).item())
}

/// Compares backward-pass gradients of every trainable parameter against
/// central finite differences on a deterministic sample of coordinates.
pub fn grad_check<F>(store: &mut ParamStore, loss_fn: F, config: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let loss = loss_fn(store, &mut tape)?;
    let base = tape.value(loss).item();
    if eval(store, &loss_fn)?.to_bits() != base.to_bits() {
        bail!(Gradient, "loss function is not deterministic");
    }
    store.zero_grad();
    tape.backward(loss)?.accumulate_into(&tape, store);
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut coords: Vec<(usize, usize)> = Vec::new();
    for (pid, p) in store.iter() {
        if !p.trainable {
            continue;
        }
        let n = p.value.len();
        let k = n.min(config.max_coords_per_param);
        let mut picked: Vec<usize> = sample(&mut rng, n, k).into_vec();
        picked.sort_unstable();
        coords.extend(picked.into_iter().map(|i| (pid.0, i)));
    }
    if let Some(total) = config.total_coords {
        if coords.len() > total {
            let keep = sample(&mut rng, coords.len(), total).into_vec();
            let mut kept: Vec<_> = keep.into_iter().map(|i| coords[i]).collect();
            kept.sort_unstable();
            coords = kept;
        }
    }

    let mut report = GradCheckReport { max_rel_error: 0.0, coords_checked: 0, worst: None };
    for (p, i) in coords {
        let pid = super::tape::ParamId(p);
        let original = store.get(pid).value.as_slice()[i];
        let analytic = store.get(pid).grad.as_slice()[i];
        store.get_mut(pid).value.as_mut_slice()[i] = original + config.epsilon;
        let plus = eval(store, &loss_fn)?;
        store.get_mut(pid).value.as_mut_slice()[i] = original - config.epsilon;
        let minus = eval(store, &loss_fn)?;
        store.get_mut(pid).value.as_mut_slice()[i] = original;
        let numeric = (plus - minus) / (2.0 * config.epsilon);
        let rel = relative_error(analytic, numeric);
        report.coords_checked += 1;
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some(CoordError { param: store.get(pid).name.clone(), index: i, analytic, numeric, rel_error: rel });
        }
    }
    Ok(report)
}
