//! Library results against independent brute-force recomputations.

mod common;

use std::collections::BTreeSet;

use common::*;
use fusegpt_core::importance::{bi_scores, mi_scores, sleb_scores, ImportanceOptions};
use fusegpt_core::{Capture, GptModel, Tensor, TokenBatch};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

proptest! {
    #[test]
    fn matmul_matches_triple_loop(m in 1usize..9, k in 1usize..9, n in 1usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::<f64>::randn(vec![m, k], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(vec![k, n], 1.0, &mut rng);
        let c = a.matmul(&b).unwrap();
        let expect = naive_matmul(a.data(), b.data(), m, k, n);
        for (x, y) in c.data().iter().zip(&expect) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn matmul_f32_matches_triple_loop(m in 1usize..20, k in 1usize..20, n in 1usize..20, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::<f64>::randn(vec![m, k], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(vec![k, n], 1.0, &mut rng);
        let c = a.cast::<f32>().matmul(&b.cast::<f32>()).unwrap();
        let expect = naive_matmul(a.data(), b.data(), m, k, n);
        for (x, y) in c.data().iter().zip(&expect) {
            prop_assert!((*x as f64 - y).abs() <= 1e-4 * (1.0 + y.abs()));
        }
    }
}

#[test]
fn forward_matches_reference_loops() {
    let model = tiny_model(3, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let batch = random_batch(&mut rng, 2, 7);
    let out = model.forward(&batch, &Capture::all_states(3)).unwrap();
    for r in 0..2 {
        let ids = batch.row(r);
        let states = reference_states(&model, ids, &[1, 2, 3]);
        for (i, state) in states.iter().enumerate() {
            let got = &out.states[&i];
            for (s, row) in state.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    assert!((got.at(&[r, s, j]) - v).abs() < 1e-10);
                }
            }
        }
        let logits = reference_logits(&model, ids, &[1, 2, 3]);
        for (s, row) in logits.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert!((out.logits.at(&[r, s, j]) - v).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn skipping_equals_physical_removal() {
    let model = tiny_model(4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let batch = random_batch(&mut rng, 3, 5);
    for i in 1..=4 {
        let mut rebuilt = model.clone();
        rebuilt.remove_block(i).unwrap();
        let (a, _) = model.forward_skipping(&batch, &BTreeSet::from([i])).unwrap();
        let b = rebuilt.forward(&batch, &Capture::none()).unwrap().logits;
        assert!(a.values_eq(&b));
    }
}

#[test]
fn metrics_match_brute_force() {
    for (n, seed) in [(2, 10), (3, 11), (4, 12)] {
        let model = tiny_model(n, seed);
        let calib = small_calibration(seed);
        let gaps = metric_oracle_gap(&model, &calib);
        assert!(gaps.iter().all(|g| *g < 1e-6), "n={n}: gaps {gaps:?}");
    }
}

#[test]
fn identity_block_has_zero_influence() {
    let mut model = tiny_model(4, 13);
    make_identity_block(&mut model, 3);
    let calib = small_calibration(14);
    let mi = mi_scores(&model, &calib, ImportanceOptions::default()).unwrap();
    let bi = bi_scores(&model, &calib).unwrap();
    assert!(mi.scores[2].value.abs() <= 1e-7);
    assert_eq!(mi.selected, 3);
    assert!(bi.scores[2].value.abs() < 1e-12);
    assert_eq!(bi.selected, 3);
}

#[test]
fn sleb_equals_mean_nll_of_rebuilt_model() {
    let model = tiny_model(3, 15);
    let calib = small_calibration(16);
    let sleb = sleb_scores(&model, &calib).unwrap();
    for i in 1..=3 {
        let mut rebuilt: GptModel<f64> = model.clone();
        rebuilt.remove_block(i).unwrap();
        let batch = TokenBatch::concat(calib.batches()).unwrap();
        let nll = rebuilt.next_token_nll(&batch).unwrap();
        assert!((sleb.scores[i - 1].value - nll).abs() < 1e-12);
    }
}
