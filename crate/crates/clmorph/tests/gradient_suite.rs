//! Finite-difference gradient checks of every op and loss, plus the
//! end-to-end check through the full network on a 16^3 input.

use clmorph::verify::{end_to_end_gradient_check, op_gradient_suite};

#[test]
fn every_op_and_loss_passes_finite_difference_checks() {
    let passed = op_gradient_suite(2024).expect("gradient check failed");
    println!("gradient checks passed: {passed:?}");
}

#[test]
fn end_to_end_loss_gradients_match_finite_differences() {
    end_to_end_gradient_check(7, 5).expect("end-to-end gradient check failed");
}

#[test]
fn gradient_suite_is_seed_robust() {
    for seed in [1, 42, 123] {
        op_gradient_suite(seed).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
    }
}
