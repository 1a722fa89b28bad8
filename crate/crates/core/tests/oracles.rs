mod common;

use common::suites::*;

#[test]
fn batch_hard_mining_agrees_with_exhaustive_search() {
    let (ok, n) = mining_oracle(60);
    assert_eq!(ok, n);
}

#[test]
fn frechet_distance_agrees_with_product_eigenvalues() {
    let e = frechet_oracle_error(40);
    assert!(e <= 1e-6, "max abs error {e}");
}

#[test]
fn kld_agrees_with_elementwise_sum() {
    let e = kld_oracle_error(200);
    assert!(e <= 1e-9, "max abs error {e}");
}

#[test]
fn denoise_step_agrees_with_formula() {
    let e = denoise_oracle_error(90);
    assert!(e <= 1e-6, "max abs error {e}");
}

#[test]
fn eval_split_agrees_with_brute_force() {
    let (ok, n) = split_oracle(20);
    assert_eq!(ok, n);
}
