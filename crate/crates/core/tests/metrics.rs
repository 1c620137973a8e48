use equidp_core::metrics::{brier_score, l0_eps_fraction, top1_accuracy, SparsityTrace};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn l0_examples() {
    assert!((l0_eps_fraction(&[0.0, 0.5, -0.001], 0.01).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(l0_eps_fraction(&[0.0; 7], 1e-5).unwrap(), 1.0);
    assert_eq!(l0_eps_fraction(&[0.0, 1.0], 0.0).unwrap(), 0.0);
    assert!(l0_eps_fraction(&[1.0], -1.0).is_err());
}

#[test]
fn brier_examples() {
    let onehot = [0.0, 1.0, 0.0, 1.0, 0.0, 0.0];
    assert_eq!(brier_score(&onehot, 3, &[1, 0]).unwrap(), 0.0);
    let uniform = vec![0.1; 10];
    assert!((brier_score(&uniform, 10, &[3]).unwrap() - 0.09).abs() < 1e-15);
    assert!(brier_score(&[0.5, 0.6], 2, &[0]).is_err());
}

fn softmax_rows(r: &mut ChaCha8Rng, b: usize, k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(b * k);
    for _ in 0..b {
        let z: Vec<f64> = (0..k).map(|_| r.random::<f64>() * 6.0 - 3.0).collect();
        let m = z.iter().cloned().fold(f64::MIN, f64::max);
        let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
        out.extend(z.iter().map(|v| (v - m).exp() / s));
    }
    out
}

#[test]
fn brier_matches_double_loop() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let (b, k) = (17, 6);
    let p = softmax_rows(&mut r, b, k);
    let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..k)).collect();
    let mut total = 0.0;
    for i in 0..b {
        for c in 0..k {
            let y = if labels[i] == c { 1.0 } else { 0.0 };
            total += (p[i * k + c] - y) * (p[i * k + c] - y);
        }
    }
    assert!((brier_score(&p, k, &labels).unwrap() - total / (b * k) as f64).abs() < 1e-12);
}

#[test]
fn accuracy_examples() {
    let p = [0.9, 0.1, 0.2, 0.8];
    assert_eq!(top1_accuracy(&p, 2, &[0, 1]).unwrap(), 1.0);
    assert_eq!(top1_accuracy(&p, 2, &[1, 0]).unwrap(), 0.0);
    // ties go to the lowest index
    assert_eq!(top1_accuracy(&[0.5, 0.5], 2, &[0]).unwrap(), 1.0);
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let n = 20_000;
    let p = softmax_rows(&mut r, n, 2);
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..2)).collect();
    let acc = top1_accuracy(&p, 2, &labels).unwrap();
    assert!((acc - 0.5).abs() < 3.0 * (0.25 / n as f64).sqrt());
}

#[test]
fn trace_records_fractions() {
    let mut t = SparsityTrace::new(0.1);
    let rec = t.record(3, &[0.0, 1.0], &[0.05, 0.05, 2.0, 0.0]).unwrap();
    assert_eq!((rec.step, rec.param_fraction, rec.grad_fraction), (3, 0.5, 0.75));
    assert_eq!(t.records.len(), 1);
}

proptest! {
    #[test]
    fn l0_monotone_in_threshold(v in prop::collection::vec(-1.0f64..1.0, 1..40), a in 0.0f64..1.0, d in 0.0f64..1.0) {
        let f1 = l0_eps_fraction(&v, a).unwrap();
        let f2 = l0_eps_fraction(&v, a + d).unwrap();
        prop_assert!(f2 >= f1);
        prop_assert!((0.0..=1.0).contains(&f1));
    }

    #[test]
    fn metrics_are_batch_permutation_invariant(seed in 0u64..500, shift in 1usize..10) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (b, k) = (10, 4);
        let p = softmax_rows(&mut r, b, k);
        let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..k)).collect();
        let perm: Vec<usize> = (0..b).map(|i| (i + shift) % b).collect();
        let pp: Vec<f64> = perm.iter().flat_map(|&i| p[i * k..(i + 1) * k].to_vec()).collect();
        let lp: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        prop_assert!((brier_score(&p, k, &labels).unwrap() - brier_score(&pp, k, &lp).unwrap()).abs() < 1e-15);
        prop_assert_eq!(top1_accuracy(&p, k, &labels).unwrap(), top1_accuracy(&pp, k, &lp).unwrap());
        let bs = brier_score(&p, k, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&bs));
    }
}
