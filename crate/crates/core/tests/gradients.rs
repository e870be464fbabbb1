mod common;

use common::*;
use smiling::nn::Activation;

#[test]
fn score_network_gradients_match_central_differences() {
    let c = nn_gradient_check(&[3, 16, 16, 3], 6, Activation::Relu, 11);
    assert!(c.n_coords >= 100, "{c:?}");
    assert!(c.max_rel_err < 1e-4, "{c:?}");
}

#[test]
fn linear_network_gradients_match_central_differences() {
    let c = nn_gradient_check(&[2, 2], 4, Activation::Identity, 12);
    assert!(c.max_rel_err < 1e-4, "{c:?}");
    let c = nn_gradient_check(&[2, 32, 2], 0, Activation::Relu, 13);
    assert!(c.n_coords >= 100 && c.max_rel_err < 1e-4, "{c:?}");
}

#[test]
fn stratified_likelihood_ratio_gradient_matches_closed_form() {
    let c = scalar_pg_check(0.3, 0.5, 1_000_000);
    assert!(c.max_rel_err() < 1e-3, "{c:?}");
    let c = scalar_pg_check(-1.2, 1.3, 1_000_000);
    assert!(c.max_rel_err() < 1e-3, "{c:?}");
}

#[test]
fn policy_network_gradient_matches_closed_form() {
    let c = network_pg_check(10, 100_000, 5);
    assert_eq!(c.n_samples, 1_000_000);
    assert!(c.net_rel_err < 1e-3, "{c:?}");
    assert!(c.log_std_rel_err < 1e-3, "{c:?}");
}
