mod common;

use common::{cif_oracle, cif_overlap, naive_attention};
use labelsync::align::{
    aif_extract, aif_extract_parallel, aif_locate_boundary, cif_integrate_fire, cif_scale, compute_fire_weights,
    quantity_loss_node, BoundaryTable, PartialLabel, CIF_TOLERANCE,
};
use labelsync::numcore::{grad_check, GradCheckConfig, Matrix, ParamStore, Tape};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn frames(n: usize, dim: usize) -> Matrix {
    // Distinct, exactly representable rows so weighted sums can be compared exactly.
    Matrix::from_fn(n, dim, |t, c| ((t + 1) * 10 + c) as f64)
}

#[test]
fn cif_worked_example() {
    let alpha = [0.2, 0.9, 0.2, 0.3, 0.6, 0.1];
    let e = frames(6, 3);
    let out = cif_integrate_fire(&alpha, &e, PartialLabel::Discard).unwrap();
    assert_eq!(out.encoding.labels(), 2);
    assert_eq!(out.fire_frames, vec![2, 5]);
    let row = |t: usize| e.row(t - 1).to_vec();
    let lin = |terms: &[(f64, usize)]| -> Vec<f64> {
        (0..3).map(|c| terms.iter().map(|&(w, t)| w * row(t)[c]).sum()).collect()
    };
    let c1 = lin(&[(0.2, 1), (0.8, 2)]);
    let c2 = lin(&[(0.1, 2), (0.2, 3), (0.3, 4), (0.4, 5)]);
    for c in 0..3 {
        assert!((out.encoding.c.get(0, c) - c1[c]).abs() < 1e-12);
        assert!((out.encoding.c.get(1, c) - c2[c]).abs() < 1e-12);
    }
    let weights: Vec<Vec<f64>> =
        out.contributions.iter().map(|l| l.iter().map(|&(_, w)| (w * 1e12).round() / 1e12).collect()).collect();
    assert_eq!(weights, vec![vec![0.2, 0.8], vec![0.1, 0.2, 0.3, 0.4]]);
}

#[test]
fn cif_matches_second_scan_and_overlap_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..200 {
        let n = rng.random_range(3..30);
        let mut alpha: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.99)).collect();
        let scale = 3.7 / alpha.iter().sum::<f64>();
        alpha.iter_mut().for_each(|a| *a *= scale);
        let e = Matrix::randn(n, 4, 1.0, &mut rng);
        let out = cif_integrate_fire(&alpha, &e, PartialLabel::Discard).unwrap();
        assert_eq!(out.encoding.labels(), 3);
        let oracle = cif_oracle(&alpha, &e, CIF_TOLERANCE);
        assert_eq!(oracle.fire_frames, out.fire_frames);
        for (j, row) in oracle.labels.iter().enumerate() {
            assert_eq!(out.encoding.c.row(j), &row[..], "label {j} not bit-identical");
        }
        let overlap = cif_overlap(&alpha, &e, 3);
        for j in 0..3 {
            for c in 0..4 {
                assert!((overlap[j][c] - out.encoding.c.get(j, c)).abs() < 1e-12);
            }
        }
        for label in &out.contributions {
            let total: f64 = label.iter().map(|&(_, w)| w).sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn scaled_cif_fires_target_length() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..1000 {
        let n = rng.random_range(1..40);
        let alpha: Vec<f64> = (0..n).map(|_| rng.random_range(1e-3..1.0)).collect();
        let target = rng.random_range(1..=12);
        let scaled = cif_scale(&alpha, target).unwrap();
        assert!((scaled.alpha_hat.iter().sum::<f64>() - target as f64).abs() < 1e-9);
        let out = cif_integrate_fire(&scaled.alpha_hat, &Matrix::zeros(n, 2), PartialLabel::Emit).unwrap();
        assert_eq!(out.encoding.labels(), target);
    }
}

#[test]
fn boundary_worked_example() {
    // Cumulative sums: 0.2 0.4 0.6 0.8 1.1 | 1.3 1.5 1.6 1.8 1.95 2.15 ...
    let alpha = [0.2, 0.2, 0.2, 0.2, 0.3, 0.2, 0.2, 0.1, 0.2, 0.15, 0.2, 0.3];
    let cum: Vec<f64> = alpha.iter().scan(0.0, |s, a| { *s += a; Some(*s) }).collect();
    assert!(cum[3] <= 1.0 && cum[4] > 1.0);
    assert!(cum[9] <= 2.0 && cum[10] > 2.0);
    assert_eq!(aif_locate_boundary(&alpha, 1).unwrap(), 4);
    assert_eq!(aif_locate_boundary(&alpha, 2).unwrap(), 10);
    assert_eq!(BoundaryTable::from_weights(&alpha, 2).as_slice(), &[4, 10]);
}

#[test]
fn parallel_extraction_equals_sequential() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..50 {
        let t = rng.random_range(1..25);
        let labels = rng.random_range(1..8);
        let d = rng.random_range(2..9);
        let alpha: Vec<f64> = (0..t).map(|_| rng.random_range(0.05..0.95)).collect();
        let bounds = BoundaryTable::from_weights(&alpha, labels);
        let q = Matrix::randn(labels, d, 1.0, &mut rng);
        let kv = Matrix::randn(t, d, 1.0, &mut rng);
        let mut tape = Tape::new();
        let qn = tape.leaf(q.clone());
        let kvn = tape.leaf(kv.clone());
        let par = aif_extract_parallel(&mut tape, qn, kvn, kvn, &bounds).unwrap();
        let par = tape.value(par).clone();
        for j in 0..labels {
            let qj = tape.leaf(Matrix::row_vector(q.row(j)));
            let seq = aif_extract(&mut tape, qj, kvn, kvn, bounds.as_slice()[j]).unwrap();
            let naive = naive_attention(q.row(j), &kv, &kv, bounds.as_slice()[j]);
            for c in 0..d {
                assert!((tape.value(seq).get(0, c) - par.get(j, c)).abs() <= 1e-12);
                assert!((naive[c] - par.get(j, c)).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn parallel_rejects_mismatched_boundaries() {
    let mut tape = Tape::new();
    let q = tape.leaf(Matrix::zeros(2, 3));
    let kv = tape.leaf(Matrix::zeros(4, 3));
    let bounds = BoundaryTable::new(vec![2], 4).unwrap();
    assert!(aif_extract_parallel(&mut tape, q, kv, kv, &bounds).is_err());
}

#[test]
fn frames_beyond_boundary_never_matter() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let q = Matrix::randn(1, 5, 1.0, &mut rng);
    let kv = Matrix::randn(12, 5, 1.0, &mut rng);
    let extract = |kv: &Matrix| {
        let mut tape = Tape::new();
        let qn = tape.leaf(q.clone());
        let kvn = tape.leaf(kv.clone());
        let c = aif_extract(&mut tape, qn, kvn, kvn, 7).unwrap();
        tape.value(c).clone()
    };
    let base = extract(&kv);
    let mut later = kv.clone();
    later.set(9, 2, 100.0);
    assert_eq!(extract(&later), base);
    let mut earlier = kv.clone();
    earlier.set(0, 2, 100.0);
    assert_ne!(extract(&earlier), base);
}

#[test]
fn quantity_loss_gradient_is_sign() {
    let mut store = ParamStore::new();
    let logits = store.add("w", Matrix::from_rows(&[vec![0.3], vec![-1.0], vec![2.0], vec![0.1]]).unwrap());
    for target in [1usize, 4] {
        let loss_fn = |s: &ParamStore, t: &mut Tape| {
            let x = t.param(s, logits);
            let a = t.sigmoid(x, 0.0);
            quantity_loss_node(t, a, target)
        };
        let report = grad_check(&mut store, loss_fn, &GradCheckConfig::default()).unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
        let enc = Matrix::from_fn(4, 2, |r, c| if c == 1 { store.get(logits).value.get(r, 0) } else { 0.0 });
        let alpha = compute_fire_weights(&enc).unwrap();
        let mut tape = Tape::new();
        let a = tape.leaf(Matrix::from_vec(4, 1, alpha.as_slice().to_vec()).unwrap());
        let loss = quantity_loss_node(&mut tape, a, target).unwrap();
        let g = tape.backward(loss).unwrap();
        let total: f64 = tape.value(a).sum();
        let sign = if total > target as f64 { 1.0 } else { -1.0 };
        assert!(g.get(a).unwrap().as_slice().iter().all(|&v| v == sign));
    }
}

proptest! {
    #[test]
    fn boundaries_are_monotone(alpha in prop::collection::vec(0.001f64..0.999, 1..60), labels in 1usize..20) {
        let table = BoundaryTable::from_weights(&alpha, labels);
        let b = table.as_slice();
        prop_assert!(b.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(b.iter().all(|&x| x >= 1 && x <= alpha.len()));
    }

    #[test]
    fn quantity_loss_zero_iff_exact(alpha in prop::collection::vec(0.01f64..0.99, 1..20), target in 0usize..15) {
        let loss = labelsync::align::quantity_loss(&alpha, target);
        let total: f64 = alpha.iter().sum();
        prop_assert_eq!(loss == 0.0, total == target as f64);
    }
}
