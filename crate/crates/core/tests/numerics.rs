//! Gradients, Fisher diagonals and penalty gradients against independent
//! numerical oracles.

mod common;

use cmr::refiners::l2_penalty;
use common::oracles::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DRAWS: usize = 20;

#[test]
fn loss_matches_the_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..DRAWS {
        let (s, batch) = random_case(&mut rng, i);
        for ex in &batch {
            let ours = s.example_loss(ex).unwrap();
            let oracle = oracle_loss(s.arch, s.d, s.k, &s.theta, ex);
            assert!((ours - oracle).abs() < 1e-10, "{ours} vs {oracle}");
        }
    }
}

#[test]
fn batch_gradient_matches_finite_differences() {
    let e = worst_gradient_error(2, DRAWS);
    assert!(e < 1e-4, "worst rel err {e}");
}

#[test]
fn fisher_equals_brute_force_mean_of_squared_gradients() {
    let e = worst_fisher_error(3, DRAWS);
    assert!(e <= 1e-12, "worst abs err {e}");
}

#[test]
fn penalty_gradients_match_finite_differences() {
    let (l2, ewc) = worst_penalty_errors(4, DRAWS);
    assert!(l2 < 1e-4, "L2 {l2}");
    assert!(ewc < 1e-4, "EWC {ewc}");
}

#[test]
fn penalties_match_a_coordinate_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..DRAWS {
        let n = rng.random_range(1..50);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let mut expected = 0.0;
        for i in (0..n).rev() {
            expected += (a[i] - b[i]) * (a[i] - b[i]);
        }
        assert!((l2_penalty(&a, &b).unwrap() - expected).abs() < 1e-9);
    }
}
