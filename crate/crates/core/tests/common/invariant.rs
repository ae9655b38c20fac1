//! Structural properties of the scores, checked over randomized inputs.
//! Each property panics with a minimized counterexample on failure.

use std::sync::OnceLock;

use infometic_core::datagen::{select_hard_negative, semantic_count};
use infometic_core::encoding::PosSet;
use infometic_core::evalharness::{kendall_tau, pearson, retrieval_recall, TauVariant};
use infometic_core::scoring::{score_features, token_decisions, ScoreOptions};
use infometic_core::training::nce_loss;
use infometic_core::{Model, ModelConfig, ScoreReport, TaggedCaption, TokenScores};
use ndarray::Array2;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{random_caption, random_image, D};

pub const CASES: u32 = 1000;

/// A few models with perturbed scoring projections so attention is not
/// trivially aligned.
fn models() -> &'static [Model] {
    static MODELS: OnceLock<Vec<Model>> = OnceLock::new();
    MODELS.get_or_init(|| {
        (0..4)
            .map(|seed| {
                let mut m = Model::new(ModelConfig::desk(D, seed)).unwrap();
                let mut r = ChaCha8Rng::seed_from_u64(seed + 100);
                for (name, t) in m.params.iter_mut() {
                    if name.starts_with("scoring.w") {
                        t.mapv_inplace(|v| v + 0.3 * (r.random::<f64>() - 0.5));
                    }
                }
                m
            })
            .collect()
    })
}

fn boxes_of(img: &infometic_core::ImageTokenFeatures) -> Vec<[f64; 4]> {
    img.norm_boxes
        .rows()
        .into_iter()
        .map(|r| [r[0], r[1], r[2], r[3]])
        .collect()
}

fn report(seed: u64, m: usize, n: usize, beta: f64) -> ScoreReport {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let img = random_image(&mut r, m, D);
    let cap = random_caption(&mut r, n, D);
    let model = &models()[(seed % 4) as usize];
    let opts = ScoreOptions { beta, plus: false };
    score_features(model, &img, &cap, &boxes_of(&img), None, opts).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(CASES))]

    fn token_scores_lie_on_the_simplex(seed in any::<u64>(), m in 1usize..6, n in 1usize..9) {
        let rep = report(seed, m, n, 0.1);
        prop_assert_eq!(rep.alpha_v.len(), m + 1);
        prop_assert_eq!(rep.alpha_t.len(), n);
        for a in [&rep.alpha_v, &rep.alpha_t] {
            prop_assert!(a.iter().all(|&x| x >= 0.0 && x <= 1.0));
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    fn overall_is_exact_sum(seed in any::<u64>(), m in 1usize..6, n in 1usize..9) {
        let rep = report(seed, m, n, 0.1);
        prop_assert_eq!(rep.overall, rep.precision + rep.recall);
    }

    fn region_permutation_invariance(seed in any::<u64>(), m in 1usize..6, n in 1usize..9) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let img = random_image(&mut r, m, D);
        let cap = random_caption(&mut r, n, D);
        let mut perm: Vec<usize> = (0..m).collect();
        perm.shuffle(&mut r);
        let shuffled = img.permute_regions(&perm);
        let model = &models()[(seed % 4) as usize];
        let opts = ScoreOptions::default();
        let a = score_features(model, &img, &cap, &boxes_of(&img), None, opts).unwrap();
        let b = score_features(model, &shuffled, &cap, &boxes_of(&shuffled), None, opts).unwrap();
        prop_assert!((a.recall - b.recall).abs() < 1e-5);
        prop_assert!((a.precision - b.precision).abs() < 1e-5);
        prop_assert!((a.overall - b.overall).abs() < 1e-5);
        for (i, &p) in perm.iter().enumerate() {
            prop_assert!((b.alpha_v[i] - a.alpha_v[p]).abs() < 1e-5);
        }
        prop_assert!((b.alpha_v[m] - a.alpha_v[m]).abs() < 1e-5);
        for (x, y) in a.alpha_t.iter().zip(&b.alpha_t) {
            prop_assert!((x - y).abs() < 1e-5);
        }
    }

    /// Raising beta can only turn positive decisions negative.
    fn decisions_monotone_in_beta(
        seed in any::<u64>(),
        m in 1usize..6,
        n in 1usize..9,
        b1 in 0.01f64..0.99,
        b2 in 0.01f64..0.99,
    ) {
        let (lo, hi) = if b1 <= b2 { (b1, b2) } else { (b2, b1) };
        let rep = report(seed, m, n, 0.1);
        let scores = rep.token_scores();
        let a = token_decisions(&scores, &rep.semantic_mask, lo).unwrap();
        let b = token_decisions(&scores, &rep.semantic_mask, hi).unwrap();
        for (x, y) in a.correct_words.iter().zip(&b.correct_words) {
            prop_assert_eq!(x.is_some(), y.is_some());
            prop_assert!(!(y == &Some(true) && x == &Some(false)));
        }
        for (x, y) in a.mentioned_regions.iter().zip(&b.mentioned_regions) {
            prop_assert!(!(*y && !*x));
        }
        prop_assert!(!(b.null_flag && !a.null_flag));
        // Scores do not depend on the threshold.
        let mut again = rep.clone();
        again.rethreshold(hi).unwrap();
        prop_assert_eq!(&again.alpha_v, &rep.alpha_v);
        prop_assert_eq!(again.overall, rep.overall);
    }

    fn decisions_are_strict(alpha in prop::collection::vec(0.0f64..1.0, 2..8), k in 0usize..8) {
        let beta = alpha[k % alpha.len()].clamp(1e-6, 1.0 - 1e-6);
        let scores = TokenScores { alpha_v: alpha.clone(), alpha_t: alpha.clone() };
        let mask = vec![true; alpha.len()];
        let d = token_decisions(&scores, &mask, beta).unwrap();
        for (i, &a) in alpha.iter().enumerate() {
            prop_assert_eq!(d.correct_words[i], Some(a > beta));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    fn nce_is_shift_invariant(seed in any::<u64>(), b in 1usize..7, c in -5.0f64..5.0) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let s = Array2::from_shape_simple_fn((b, b), || r.random_range(-3.0..3.0));
        let shifted = s.mapv(|v| v + c);
        let a = nce_loss(s.view()).unwrap();
        prop_assert!((a - nce_loss(shifted.view()).unwrap()).abs() < 1e-9);
        prop_assert!(a >= 0.0);
    }

    fn kendall_invariant_under_monotone_maps(
        x in prop::collection::vec(-10.0f64..10.0, 3..30),
        seed in any::<u64>(),
    ) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<f64> = x.iter().map(|v| v + r.random_range(-5.0..5.0)).collect();
        let fx: Vec<f64> = x.iter().map(|v| v.exp() * 3.0 + 1.0).collect();
        if let (Ok(a), Ok(b)) = (
            kendall_tau(&x, &y, TauVariant::B),
            kendall_tau(&fx, &y, TauVariant::B),
        ) {
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&a));
        }
        if let (Ok(a), Ok(b)) = (pearson(&x, &y), pearson(&x.iter().map(|v| 2.0 * v - 1.0).collect::<Vec<_>>(), &y)) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    fn recall_at_k_is_monotone(seed in any::<u64>(), n in 1usize..10) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let s = Array2::from_shape_simple_fn((n, n), || r.random::<f64>());
        let mut prev = (0.0, 0.0);
        for k in 1..=n {
            let got = retrieval_recall(s.view(), k).unwrap();
            prop_assert!(got.image_to_text >= prev.0 && got.text_to_image >= prev.1);
            prev = (got.image_to_text, got.text_to_image);
        }
        prop_assert_eq!(prev, (1.0, 1.0));
    }

    fn hard_negative_ignores_caption_order(seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let words = ["dog", "cat", "red", "runs", "big", "tree"];
        let caps: Vec<TaggedCaption> = (0..r.random_range(2..6))
            .map(|_| {
                let n = r.random_range(1..6);
                let toks: Vec<String> = (0..n).map(|_| words[r.random_range(0..words.len())].to_string()).collect();
                let pos: Vec<String> = (0..n).map(|_| ["NOUN", "DET", "ADJ"][r.random_range(0..3)].to_string()).collect();
                TaggedCaption::new(toks, pos).unwrap()
            })
            .collect();
        let sem = PosSet::training();
        let a = select_hard_negative(&caps, &sem).unwrap();
        let mut perm: Vec<usize> = (0..caps.len()).collect();
        perm.shuffle(&mut r);
        let shuffled: Vec<TaggedCaption> = perm.iter().map(|&i| caps[i].clone()).collect();
        let b = select_hard_negative(&shuffled, &sem).unwrap();
        match (a, b) {
            (Some(a), Some(b)) => {
                prop_assert_eq!(&caps[a.positive], &shuffled[b.positive]);
                let mut na: Vec<&TaggedCaption> = a.negatives.iter().map(|&i| &caps[i]).collect();
                let mut nb: Vec<&TaggedCaption> = b.negatives.iter().map(|&i| &shuffled[i]).collect();
                na.sort_by_key(|c| (c.tokens.clone(), c.pos.clone()));
                nb.sort_by_key(|c| (c.tokens.clone(), c.pos.clone()));
                prop_assert_eq!(na, nb);
                for &i in &a.negatives {
                    prop_assert!(semantic_count(&caps[i], &sem) < semantic_count(&caps[a.positive], &sem));
                }
            }
            (None, None) => {}
            _ => prop_assert!(false, "outcome depends on order"),
        }
    }
}

/// Every property, by name.
pub const CHECKS: &[(&str, fn())] = &[
    (
        "token_scores_lie_on_the_simplex",
        token_scores_lie_on_the_simplex,
    ),
    ("overall_is_exact_sum", overall_is_exact_sum),
    (
        "region_permutation_invariance",
        region_permutation_invariance,
    ),
    ("decisions_monotone_in_beta", decisions_monotone_in_beta),
    ("decisions_are_strict", decisions_are_strict),
    ("nce_is_shift_invariant", nce_is_shift_invariant),
    (
        "kendall_invariant_under_monotone_maps",
        kendall_invariant_under_monotone_maps,
    ),
    ("recall_at_k_is_monotone", recall_at_k_is_monotone),
    (
        "hard_negative_ignores_caption_order",
        hard_negative_ignores_caption_order,
    ),
];
