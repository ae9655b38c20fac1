//! Library functions against naive loop implementations on random instances.

mod common;

use common::oracle;
use infometic_core::evalharness::{kendall_tau, pearson, TauVariant};
use infometic_core::training::{fine_text_loss, fine_vision_loss, htn_loss, nce_loss};

#[test]
fn recall_and_precision_match_pooled_cosine() {
    oracle::recall_and_precision_match_pooled_cosine();
}

#[test]
fn token_scores_match_bilinear_softmax() {
    oracle::token_scores_match_bilinear_softmax();
}

#[test]
fn nce_matches_naive_softmax() {
    oracle::nce_matches_naive_softmax();
}

#[test]
fn htn_matches_naive_softplus() {
    oracle::htn_matches_naive_softplus();
}

#[test]
fn fine_losses_match_naive_sums() {
    oracle::fine_losses_match_naive_sums();
}

#[test]
fn kendall_counts_are_exact() {
    oracle::kendall_counts_are_exact();
}

#[test]
fn pearson_matches_sum_formula() {
    oracle::pearson_matches_sum_formula();
}

#[test]
fn recall_at_k_is_exact() {
    oracle::recall_at_k_is_exact();
}

#[test]
fn pascal_accuracy_counts_strict_wins() {
    oracle::pascal_accuracy_counts_strict_wins();
}

// Frozen hand-computed values.

#[test]
fn frozen_kendall_and_pearson() {
    // One discordant pair out of six.
    let x = [1.0, 2.0, 3.0, 4.0];
    let y = [1.0, 3.0, 2.0, 4.0];
    assert!((kendall_tau(&x, &y, TauVariant::B).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    assert!((kendall_tau(&x, &y, TauVariant::C).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    assert!((pearson(&x, &y).unwrap() - 0.8).abs() < 1e-12);
    // Ties in y: pairs (C, D, Ty) = (4, 1, 1), so tau_b = 3 / sqrt(6 * 5).
    let y = [1.0, 1.0, 3.0, 2.0];
    let want = 3.0 / 30f64.sqrt();
    assert!((kendall_tau(&x, &y, TauVariant::B).unwrap() - want).abs() < 1e-12);
}

#[test]
fn frozen_losses() {
    // log(2) each way on a uniform 2 x 2 matrix.
    let s = ndarray::array![[0.0, 0.0], [0.0, 0.0]];
    assert!((nce_loss(s.view()).unwrap() - 2f64.ln()).abs() < 1e-12);
    assert!((htn_loss(1.0, 1.0) - 2f64.ln()).abs() < 1e-12);
    // Two labelled tokens, one positive at 0.5.
    let l = fine_text_loss(&[0.5, 0.3, 0.2], &[1, 0, -1]).unwrap().loss;
    assert!((l - 0.5f64.ln().abs() / 2.0).abs() < 1e-12);
    // Null entry excluded from both the sum and the normalizer.
    let l = fine_vision_loss(&[0.25, 0.25, 0.5], &[1, 1, 0])
        .unwrap()
        .loss;
    assert!((l - 4f64.ln()).abs() < 1e-12);
}
