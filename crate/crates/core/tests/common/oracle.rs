//! Library functions against naive loop implementations on random instances.
//! Each check panics on the first mismatch.

use infometic_core::evalharness::{
    kendall_tau, pair_counts, pascal_accuracy, pearson, retrieval_recall, PairwiseChoice,
    Preference, Subset, TauVariant,
};
use infometic_core::scoring::{
    precision_score, recall_score, text_token_scores, vision_token_scores, ScoringParams,
};
use infometic_core::training::{fine_text_loss, fine_vision_loss, htn_loss, nce_loss};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const TRIALS: u64 = 100;
const TOL: f64 = 1e-6;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gauss(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.sample(StandardNormal)).collect()
}

fn matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|_| gauss(r, cols)).collect()
}

fn to_array(m: &[Vec<f64>]) -> Array2<f64> {
    let cols = m.first().map_or(0, |r| r.len());
    Array2::from_shape_fn((m.len(), cols), |(i, j)| m[i][j])
}

fn simplex(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| r.random::<f64>() + 1e-3).collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|x| x / s).collect()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= TOL * b.abs().max(1.0)
}

// ---------------------------------------------------------------------------
// Naive references

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

fn conditioned(alpha: &[f64], feats: &[Vec<f64>], anchor: &[f64], tau: f64) -> f64 {
    let d = anchor.len();
    let mut pooled = vec![0.0; d];
    for (k, row) in feats.iter().enumerate() {
        for j in 0..d {
            pooled[j] += alpha[k] * row[j];
        }
    }
    cos(&pooled, anchor) / tau
}

fn mat_vec_left(v: &[f64], w: &[Vec<f64>]) -> Vec<f64> {
    // v^T W for a d x d matrix stored by rows.
    let d = w[0].len();
    (0..d)
        .map(|j| (0..v.len()).map(|i| v[i] * w[i][j]).sum())
        .collect()
}

fn bilinear_softmax(
    query: &[f64],
    keys: &[Vec<f64>],
    wq: &[Vec<f64>],
    wk: &[Vec<f64>],
) -> Vec<f64> {
    let q = mat_vec_left(query, wq);
    let logits: Vec<f64> = keys.iter().map(|k| dot(&q, &mat_vec_left(k, wk))).collect();
    let e: Vec<f64> = logits.iter().map(|l| l.exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

fn naive_nce(s: &[Vec<f64>]) -> f64 {
    let b = s.len();
    let mut total = 0.0;
    for i in 0..b {
        let row: f64 = (0..b).map(|j| s[i][j].exp()).sum();
        let col: f64 = (0..b).map(|j| s[j][i].exp()).sum();
        total += -(s[i][i].exp() / row).ln() - (s[i][i].exp() / col).ln();
    }
    total / (2.0 * b as f64)
}

fn naive_htn(pos: f64, neg: f64) -> f64 {
    (1.0 + (neg - pos).exp()).ln()
}

fn naive_fine_text(alpha: &[f64], y: &[i8]) -> f64 {
    let labelled = y.iter().filter(|&&v| v >= 0).count() as f64;
    let mut s = 0.0;
    for i in 0..y.len() {
        if y[i] == 1 {
            s += alpha[i].ln();
        }
    }
    -s / labelled
}

fn naive_fine_vision(alpha: &[f64], y: &[u8]) -> f64 {
    let m = alpha.len() - 1;
    let mut s = 0.0;
    for k in 0..m {
        if y[k] == 1 {
            s += alpha[k].ln();
        }
    }
    -s / m as f64
}

fn sign(v: f64) -> i64 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

/// `(concordant, discordant, ties_x, ties_y, ties_xy)` by enumerating pairs.
fn naive_pairs(x: &[f64], y: &[f64]) -> (u64, u64, u64, u64, u64) {
    let (mut c, mut d, mut tx, mut ty, mut txy) = (0, 0, 0, 0, 0);
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            let sx = sign(x[i] - x[j]);
            let sy = sign(y[i] - y[j]);
            if sx == 0 {
                tx += 1;
            }
            if sy == 0 {
                ty += 1;
            }
            if sx == 0 && sy == 0 {
                txy += 1;
            }
            match sx * sy {
                1 => c += 1,
                -1 => d += 1,
                _ => {}
            }
        }
    }
    (c, d, tx, ty, txy)
}

fn naive_tau_b(x: &[f64], y: &[f64]) -> f64 {
    let n0 = (x.len() * (x.len() - 1) / 2) as f64;
    let (c, d, tx, ty, _) = naive_pairs(x, y);
    (c as f64 - d as f64) / ((n0 - tx as f64) * (n0 - ty as f64)).sqrt()
}

fn naive_tau_c(x: &[f64], y: &[f64]) -> f64 {
    let count = |v: &[f64]| {
        let mut s: Vec<i64> = v.iter().map(|a| (*a * 1e6) as i64).collect();
        s.sort();
        s.dedup();
        s.len() as f64
    };
    let m = count(x).min(count(y));
    let n = x.len() as f64;
    let (c, d, ..) = naive_pairs(x, y);
    2.0 * m * (c as f64 - d as f64) / (n * n * (m - 1.0))
}

fn naive_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy): (f64, f64) = (x.iter().sum(), y.iter().sum());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

/// R@k: the diagonal counts as a hit if fewer than `k` entries beat it, with
/// ties broken toward the lower index.
fn naive_recall(s: &[Vec<f64>], k: usize) -> (f64, f64) {
    let n = s.len();
    let mut rows = 0;
    let mut cols = 0;
    for i in 0..n {
        let mut ahead_r = 0;
        let mut ahead_c = 0;
        for j in 0..n {
            if s[i][j] > s[i][i] || (s[i][j] == s[i][i] && j < i) {
                ahead_r += 1;
            }
            if s[j][i] > s[i][i] || (s[j][i] == s[i][i] && j < i) {
                ahead_c += 1;
            }
        }
        rows += (ahead_r < k) as usize;
        cols += (ahead_c < k) as usize;
    }
    (rows as f64 / n as f64, cols as f64 / n as f64)
}

/// Small integers so that ties are common.
fn ordinal(r: &mut ChaCha8Rng, n: usize, levels: u32) -> Vec<f64> {
    (0..n).map(|_| r.random_range(0..levels) as f64).collect()
}

pub fn recall_and_precision_match_pooled_cosine() {
    for t in 0..TRIALS {
        let mut r = rng(t);
        let d = r.random_range(2..8);
        let m = r.random_range(1..6);
        let n = r.random_range(1..9);
        let tau = r.random_range(0.01..2.0);
        let vision = matrix(&mut r, m + 1, d);
        let text = matrix(&mut r, n, d);
        let v_g = gauss(&mut r, d);
        let t_g = gauss(&mut r, d);
        let a_v = simplex(&mut r, m + 1);
        let a_t = simplex(&mut r, n);
        let got_r = recall_score(
            &a_v,
            to_array(&vision).view(),
            Array1::from(v_g.clone()).view(),
            tau,
        )
        .unwrap();
        let got_p = precision_score(
            &a_t,
            to_array(&text).view(),
            Array1::from(t_g.clone()).view(),
            tau,
        )
        .unwrap();
        assert!(
            close(got_r, conditioned(&a_v, &vision, &v_g, tau)),
            "trial {t}"
        );
        assert!(
            close(got_p, conditioned(&a_t, &text, &t_g, tau)),
            "trial {t}"
        );
    }
}

pub fn token_scores_match_bilinear_softmax() {
    for t in 0..TRIALS {
        let mut r = rng(1000 + t);
        let d = r.random_range(2..6);
        let m = r.random_range(1..6);
        let n = r.random_range(1..9);
        let w: Vec<Vec<Vec<f64>>> = (0..4)
            .map(|_| {
                matrix(&mut r, d, d)
                    .into_iter()
                    .map(|row| row.into_iter().map(|v| v * 0.5).collect())
                    .collect()
            })
            .collect();
        let params = ScoringParams {
            wq_v: to_array(&w[0]),
            wk_v: to_array(&w[1]),
            wq_t: to_array(&w[2]),
            wk_t: to_array(&w[3]),
            tau: 0.07,
        };
        let vision = matrix(&mut r, m + 1, d);
        let text = matrix(&mut r, n, d);
        let v_g = gauss(&mut r, d);
        let t_g = gauss(&mut r, d);
        let a_v = vision_token_scores(
            Array1::from(t_g.clone()).view(),
            to_array(&vision).view(),
            &params,
        )
        .unwrap();
        let a_t = text_token_scores(
            Array1::from(v_g.clone()).view(),
            to_array(&text).view(),
            &params,
        )
        .unwrap();
        let want_v = bilinear_softmax(&t_g, &vision, &w[0], &w[1]);
        let want_t = bilinear_softmax(&v_g, &text, &w[2], &w[3]);
        for (a, b) in a_v.iter().zip(&want_v).chain(a_t.iter().zip(&want_t)) {
            assert!((a - b).abs() <= TOL, "trial {t}: {a} vs {b}");
        }
    }
}

pub fn nce_matches_naive_softmax() {
    for t in 0..TRIALS {
        let mut r = rng(2000 + t);
        let b = r.random_range(1..9);
        let s: Vec<Vec<f64>> = matrix(&mut r, b, b)
            .into_iter()
            .map(|row| row.into_iter().map(|v| 3.0 * v).collect())
            .collect();
        let got = nce_loss(to_array(&s).view()).unwrap();
        assert!(close(got, naive_nce(&s)), "trial {t}");
    }
}

pub fn htn_matches_naive_softplus() {
    for t in 0..TRIALS {
        let mut r = rng(3000 + t);
        let pos = 5.0 * r.sample::<f64, _>(StandardNormal);
        let neg = 5.0 * r.sample::<f64, _>(StandardNormal);
        assert!(close(htn_loss(pos, neg), naive_htn(pos, neg)), "trial {t}");
    }
}

pub fn fine_losses_match_naive_sums() {
    for t in 0..TRIALS {
        let mut r = rng(4000 + t);
        let n = r.random_range(2..10);
        let a_t = simplex(&mut r, n);
        let mut y_t: Vec<i8> = (0..n).map(|_| r.random_range(-1..=1)).collect();
        y_t[0] = 1;
        let got = fine_text_loss(&a_t, &y_t).unwrap().loss;
        assert!(close(got, naive_fine_text(&a_t, &y_t)), "text trial {t}");

        let m = r.random_range(1..7);
        let a_v = simplex(&mut r, m + 1);
        let mut y_v: Vec<u8> = (0..=m).map(|_| r.random_range(0..=1)).collect();
        y_v[m] = 0;
        let got = fine_vision_loss(&a_v, &y_v).unwrap().loss;
        assert!(
            close(got, naive_fine_vision(&a_v, &y_v)),
            "vision trial {t}"
        );
    }
}

pub fn kendall_counts_are_exact() {
    for t in 0..TRIALS {
        let mut r = rng(5000 + t);
        let n = r.random_range(2..40);
        let (lx, ly) = (r.random_range(2..6), r.random_range(2..6));
        let x = ordinal(&mut r, n, lx);
        let y = ordinal(&mut r, n, ly);
        let c = pair_counts(&x, &y).unwrap();
        assert_eq!(
            (c.concordant, c.discordant, c.ties_x, c.ties_y, c.ties_xy),
            naive_pairs(&x, &y),
            "trial {t}"
        );
        match kendall_tau(&x, &y, TauVariant::B) {
            Ok(v) => assert!(close(v, naive_tau_b(&x, &y)), "tau_b trial {t}"),
            Err(_) => assert!(!naive_tau_b(&x, &y).is_finite(), "tau_b trial {t}"),
        }
        match kendall_tau(&x, &y, TauVariant::C) {
            Ok(v) => assert!(close(v, naive_tau_c(&x, &y)), "tau_c trial {t}"),
            Err(_) => assert!(!naive_tau_c(&x, &y).is_finite(), "tau_c trial {t}"),
        }
    }
}

pub fn pearson_matches_sum_formula() {
    for t in 0..TRIALS {
        let mut r = rng(6000 + t);
        let n = r.random_range(3..30);
        let x = gauss(&mut r, n);
        let y: Vec<f64> = x
            .iter()
            .map(|v| 0.5 * v + r.sample::<f64, _>(StandardNormal))
            .collect();
        assert!(
            close(pearson(&x, &y).unwrap(), naive_pearson(&x, &y)),
            "trial {t}"
        );
    }
}

pub fn recall_at_k_is_exact() {
    for t in 0..TRIALS {
        let mut r = rng(7000 + t);
        let n = r.random_range(1..10);
        let k = r.random_range(1..=n);
        // Coarse values force ties.
        let s: Vec<Vec<f64>> = (0..n).map(|_| ordinal(&mut r, n, 4)).collect();
        let got = retrieval_recall(to_array(&s).view(), k).unwrap();
        assert_eq!(
            (got.image_to_text, got.text_to_image),
            naive_recall(&s, k),
            "trial {t}"
        );
    }
}

pub fn pascal_accuracy_counts_strict_wins() {
    let choice = |a: f64, b: f64, pref, subset| PairwiseChoice {
        score_a: a,
        score_b: b,
        human_pref: pref,
        subset,
    };
    let acc = pascal_accuracy(&[
        choice(2.0, 1.0, Preference::A, Subset::HC),
        choice(1.0, 1.0, Preference::A, Subset::HC),
        choice(1.0, 3.0, Preference::B, Subset::MM),
    ])
    .unwrap();
    assert_eq!(acc.per_subset[&Subset::HC], 0.5);
    assert_eq!(acc.per_subset[&Subset::MM], 1.0);
    assert_eq!(acc.mean, 0.75);
}

/// Every randomized check, by name.
pub const CHECKS: &[(&str, fn())] = &[
    (
        "recall_and_precision_match_pooled_cosine",
        recall_and_precision_match_pooled_cosine,
    ),
    (
        "token_scores_match_bilinear_softmax",
        token_scores_match_bilinear_softmax,
    ),
    ("nce_matches_naive_softmax", nce_matches_naive_softmax),
    ("htn_matches_naive_softplus", htn_matches_naive_softplus),
    ("fine_losses_match_naive_sums", fine_losses_match_naive_sums),
    ("kendall_counts_are_exact", kendall_counts_are_exact),
    ("pearson_matches_sum_formula", pearson_matches_sum_formula),
    ("recall_at_k_is_exact", recall_at_k_is_exact),
    (
        "pascal_accuracy_counts_strict_wins",
        pascal_accuracy_counts_strict_wins,
    ),
];
