//! Benchmark statistics: rank and linear correlation, pairwise accuracy,
//! retrieval recall and token-level accuracy.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::encoding::{CaptionTokenFeatures, ImageTokenFeatures, PosSet};
use crate::error::{Error, Result};
use crate::fusion::Mode;
use crate::model::Model;
use crate::scoring::{encode_caption_vars, encode_image_vars, score_encoded, ScoreReport};

fn check_pairs(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} metric scores for {} human scores",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::UndefinedCorrelation("fewer than two pairs".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("correlation input".into()));
    }
    Ok(())
}

/// Pair counts over all `n (n - 1) / 2` unordered pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct PairCounts {
    pub n: u64,
    pub concordant: u64,
    pub discordant: u64,
    /// Pairs tied in `x` (including joint ties).
    pub ties_x: u64,
    /// Pairs tied in `y` (including joint ties).
    pub ties_y: u64,
    pub ties_xy: u64,
}

fn tie_pairs<T: PartialEq>(sorted: impl Iterator<Item = T>) -> u64 {
    let mut total = 0;
    let mut run = 0u64;
    let mut prev: Option<T> = None;
    for v in sorted {
        if prev.as_ref() == Some(&v) {
            run += 1;
        } else {
            total += run * (run.saturating_sub(1)) / 2;
            run = 1;
        }
        prev = Some(v);
    }
    total + run * run.saturating_sub(1) / 2
}

/// Counts inversions (strictly greater before smaller) while merge sorting.
fn merge_count(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut inv =
        merge_count(&mut v[..mid], &mut buf[..mid]) + merge_count(&mut v[mid..], &mut buf[mid..]);
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf[k] = v[j];
            inv += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    inv
}

/// Concordance counts in `O(n log n)`.
pub fn pair_counts(x: &[f64], y: &[f64]) -> Result<PairCounts> {
    check_pairs(x, y)?;
    // -0.0 and 0.0 must tie under the total order used for sorting.
    let x: Vec<f64> = x.iter().map(|v| v + 0.0).collect();
    let y: Vec<f64> = y.iter().map(|v| v + 0.0).collect();
    let n = x.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(y[a].total_cmp(&y[b])));
    let ties_x = tie_pairs(idx.iter().map(|&i| x[i]));
    let ties_xy = tie_pairs(idx.iter().map(|&i| (x[i], y[i])));
    let mut ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
    let mut buf = vec![0.0; n];
    let discordant = merge_count(&mut ys, &mut buf);
    let ties_y = tie_pairs(ys.iter().copied());
    let n0 = (n as u64) * (n as u64 - 1) / 2;
    let concordant = n0 + ties_xy - ties_x - ties_y - discordant;
    Ok(PairCounts {
        n: n as u64,
        concordant,
        discordant,
        ties_x,
        ties_y,
        ties_xy,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TauVariant {
    B,
    C,
}

/// Kendall rank correlation; `C` uses the Stuart denominator.
pub fn kendall_tau(x: &[f64], y: &[f64], variant: TauVariant) -> Result<f64> {
    let c = pair_counts(x, y)?;
    tau_from_counts(&c, distinct(x).min(distinct(y)), variant)
}

fn distinct(v: &[f64]) -> usize {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s.dedup();
    s.len()
}

/// Kendall statistic from pair counts; `k` is the smaller number of distinct
/// values on either side (used by `C` only).
pub fn tau_from_counts(c: &PairCounts, k: usize, variant: TauVariant) -> Result<f64> {
    let n0 = c.n * (c.n - 1) / 2;
    let s = c.concordant as f64 - c.discordant as f64;
    match variant {
        TauVariant::B => {
            let (a, b) = (n0 - c.ties_x, n0 - c.ties_y);
            if a == 0 || b == 0 {
                return Err(Error::UndefinedCorrelation("all values tied".into()));
            }
            Ok(s / ((a as f64) * (b as f64)).sqrt())
        }
        TauVariant::C => {
            if k < 2 {
                return Err(Error::UndefinedCorrelation("all values tied".into()));
            }
            let n = c.n as f64;
            let k = k as f64;
            Ok(2.0 * s / (n * n * (k - 1.0) / k))
        }
    }
}

/// Product-moment correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pairs(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Subset {
    HC,
    HI,
    HM,
    MM,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preference {
    A,
    B,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairwiseChoice {
    pub score_a: f64,
    pub score_b: f64,
    pub human_pref: Preference,
    pub subset: Subset,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PascalAccuracy {
    pub per_subset: BTreeMap<Subset, f64>,
    /// Mean of the subset accuracies present.
    pub mean: f64,
}

/// A choice counts as correct iff the strictly higher metric score sits on
/// the human-preferred caption.
pub fn pascal_accuracy(choices: &[PairwiseChoice]) -> Result<PascalAccuracy> {
    if choices.is_empty() {
        return Err(Error::InvalidArgument("no pairwise choices".into()));
    }
    let mut tally: BTreeMap<Subset, (usize, usize)> = BTreeMap::new();
    for c in choices {
        let ok = match c.human_pref {
            Preference::A => c.score_a > c.score_b,
            Preference::B => c.score_b > c.score_a,
        };
        let t = tally.entry(c.subset).or_default();
        t.0 += ok as usize;
        t.1 += 1;
    }
    let per_subset: BTreeMap<Subset, f64> = tally
        .into_iter()
        .map(|(s, (ok, n))| (s, ok as f64 / n as f64))
        .collect();
    let mean = per_subset.values().sum::<f64>() / per_subset.len() as f64;
    Ok(PascalAccuracy { per_subset, mean })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RecallAtK {
    pub k: usize,
    pub image_to_text: f64,
    pub text_to_image: f64,
}

/// Position of `scores[target]` in a descending ranking where ties go to the
/// lower index.
fn rank_of(scores: impl Iterator<Item = f64> + Clone, target: usize) -> usize {
    let t = scores.clone().nth(target).expect("target in range");
    scores
        .enumerate()
        .filter(|&(j, s)| s > t || (s == t && j < target))
        .count()
}

/// R@k with ground truth on the diagonal; rows are images, columns captions.
pub fn retrieval_recall(scores: ArrayView2<f64>, k: usize) -> Result<RecallAtK> {
    let n = scores.nrows();
    if n == 0 || scores.ncols() != n {
        return Err(Error::InvalidArgument(format!(
            "score matrix must be square and non-empty, got {:?}",
            scores.dim()
        )));
    }
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("k = {k} outside 1..={n}")));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("score matrix".into()));
    }
    let hits = |f: &dyn Fn(usize) -> usize| (0..n).filter(|&i| f(i) < k).count() as f64 / n as f64;
    Ok(RecallAtK {
        k,
        image_to_text: hits(&|i| rank_of(scores.row(i).iter().copied(), i)),
        text_to_image: hits(&|i| rank_of(scores.column(i).iter().copied(), i)),
    })
}

/// Predicted and gold token judgments for one pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenJudgment {
    pub pred_word_ok: Vec<bool>,
    pub gold_word_ok: Vec<bool>,
    /// Tokens that count towards text accuracy.
    pub semantic: Vec<bool>,
    pub pred_mentioned: Vec<bool>,
    pub gold_mentioned: Vec<bool>,
}

impl TokenJudgment {
    /// Builds from a report thresholded at its own `beta`.
    pub fn from_report(
        report: &ScoreReport,
        pos: &[String],
        bad_word_idx: &[usize],
        mentioned_region_idx: &[usize],
        eval_pos: &PosSet,
    ) -> Result<Self> {
        let n = report.alpha_t.len();
        let m = report.regions.len();
        if pos.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} POS tags for {n} scored tokens",
                pos.len()
            )));
        }
        if let Some(i) = bad_word_idx.iter().find(|&&i| i >= n) {
            return Err(Error::InvalidArgument(format!(
                "bad word index {i} beyond {n} tokens"
            )));
        }
        if let Some(k) = mentioned_region_idx.iter().find(|&&k| k >= m) {
            return Err(Error::InvalidArgument(format!(
                "region index {k} beyond {m} regions"
            )));
        }
        Ok(Self {
            pred_word_ok: report.alpha_t.iter().map(|&a| a > report.beta).collect(),
            gold_word_ok: (0..n).map(|i| !bad_word_idx.contains(&i)).collect(),
            semantic: eval_pos.mask(pos),
            pred_mentioned: report.mentioned_region_mask(),
            gold_mentioned: (0..m).map(|k| mentioned_region_idx.contains(&k)).collect(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TokenAccuracy {
    pub vision: f64,
    pub text: f64,
    pub words: usize,
    pub regions: usize,
}

/// Micro-averaged token accuracies over all judgments.
pub fn captoken_accuracy(judgments: &[TokenJudgment]) -> Result<TokenAccuracy> {
    let (mut wok, mut wn, mut rok, mut rn) = (0usize, 0usize, 0usize, 0usize);
    for j in judgments {
        let n = j.semantic.len();
        if j.pred_word_ok.len() != n
            || j.gold_word_ok.len() != n
            || j.pred_mentioned.len() != j.gold_mentioned.len()
        {
            return Err(Error::DimensionMismatch(
                "judgment masks differ in length".into(),
            ));
        }
        for i in (0..n).filter(|&i| j.semantic[i]) {
            wn += 1;
            wok += (j.pred_word_ok[i] == j.gold_word_ok[i]) as usize;
        }
        rn += j.gold_mentioned.len();
        rok += j
            .pred_mentioned
            .iter()
            .zip(&j.gold_mentioned)
            .filter(|(a, b)| a == b)
            .count();
    }
    if wn == 0 {
        return Err(Error::NoSemanticWords);
    }
    if rn == 0 {
        return Err(Error::NoRegions);
    }
    Ok(TokenAccuracy {
        vision: rok as f64 / rn as f64,
        text: wok as f64 / wn as f64,
        words: wn,
        regions: rn,
    })
}

/// Recall and precision scores of every image against every caption.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrices {
    pub recall: Array2<f64>,
    pub precision: Array2<f64>,
}

impl ScoreMatrices {
    pub fn overall(&self) -> Array2<f64> {
        &self.recall + &self.precision
    }
}

/// Scores all image/caption combinations in eval mode.
pub fn score_matrices(
    model: &Model,
    images: &[ImageTokenFeatures],
    captions: &[CaptionTokenFeatures],
) -> Result<ScoreMatrices> {
    let mut g = Graph::new();
    let p = model.bind_constants(&mut g);
    let mut mode = Mode::Eval;
    let imgs = images
        .iter()
        .map(|i| encode_image_vars(&mut g, &p, model, i, &mut mode))
        .collect::<Result<Vec<_>>>()?;
    let caps = captions
        .iter()
        .map(|c| encode_caption_vars(&mut g, &p, model, c, &mut mode))
        .collect::<Result<Vec<_>>>()?;
    let mut recall = Array2::zeros((images.len(), captions.len()));
    let mut precision = Array2::zeros((images.len(), captions.len()));
    for (i, img) in imgs.iter().enumerate() {
        for (j, cap) in caps.iter().enumerate() {
            let out = score_encoded(&mut g, &p, model, img, cap, &mut mode)?;
            recall[[i, j]] = g.scalar(out.recall);
            precision[[i, j]] = g.scalar(out.precision);
        }
    }
    Ok(ScoreMatrices { recall, precision })
}

// ---------------------------------------------------------------------------
// File-driven benchmarks

/// One line of an external metric score file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreLine {
    pub image_id: String,
    pub caption_idx: usize,
    pub score: f64,
}

/// Human judgment payloads, normalized from the benchmark formats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HumanJudgment {
    /// One or more ratings, averaged.
    Ratings { scores: Vec<f64> },
    /// Binary votes, reduced to the proportion of yes.
    Binary { yes: u32, no: u32 },
    /// Preference between this caption (A) and `other_idx` (B).
    Pairwise {
        other_idx: usize,
        pref: Preference,
        subset: Subset,
    },
}

impl HumanJudgment {
    fn value(&self) -> Option<f64> {
        match self {
            HumanJudgment::Ratings { scores } if !scores.is_empty() => {
                Some(scores.iter().sum::<f64>() / scores.len() as f64)
            }
            HumanJudgment::Binary { yes, no } if yes + no > 0 => {
                Some(*yes as f64 / (yes + no) as f64)
            }
            _ => None,
        }
    }
}

/// One line of a judgment file. Without `caption_idx`, the caption index is
/// the order of appearance among lines of the same image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgmentLine {
    pub image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption_idx: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    pub human: HumanJudgment,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    KendallB,
    KendallC,
    Pearson,
    PascalAccuracy,
}

/// Statistic name to value; serializes with sorted keys.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub n: usize,
    pub values: BTreeMap<String, f64>,
}

fn resolve_caption_idx(judgments: &[JudgmentLine]) -> Vec<usize> {
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    judgments
        .iter()
        .map(|j| {
            let next = seen.entry(j.image_id.as_str()).or_insert(0);
            let idx = j.caption_idx.unwrap_or(*next);
            *next += 1;
            idx
        })
        .collect()
}

/// Joins metric scores with human judgments and computes `stats`.
pub fn run_benchmark(
    scores: &[ScoreLine],
    judgments: &[JudgmentLine],
    stats: &[Statistic],
) -> Result<BenchmarkReport> {
    let table: BTreeMap<(&str, usize), f64> = scores
        .iter()
        .map(|s| ((s.image_id.as_str(), s.caption_idx), s.score))
        .collect();
    let idx = resolve_caption_idx(judgments);
    let mut missing = Vec::new();
    let lookup = |id: &str, c: usize, missing: &mut Vec<String>| {
        let v = table.get(&(id, c)).copied();
        if v.is_none() {
            missing.push(format!("{id}#{c}"));
        }
        v
    };

    let mut metric = Vec::new();
    let mut human = Vec::new();
    let mut choices = Vec::new();
    for (j, &c) in judgments.iter().zip(&idx) {
        match &j.human {
            HumanJudgment::Pairwise {
                other_idx,
                pref,
                subset,
            } => {
                let a = lookup(&j.image_id, c, &mut missing);
                let b = lookup(&j.image_id, *other_idx, &mut missing);
                if let (Some(score_a), Some(score_b)) = (a, b) {
                    choices.push(PairwiseChoice {
                        score_a,
                        score_b,
                        human_pref: *pref,
                        subset: *subset,
                    });
                }
            }
            h => {
                let v = h.value().ok_or_else(|| {
                    Error::Schema(format!("{}#{c}: empty human judgment", j.image_id))
                })?;
                if let Some(s) = lookup(&j.image_id, c, &mut missing) {
                    metric.push(s);
                    human.push(v);
                }
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Schema(format!(
            "no metric score for {}",
            missing.join(", ")
        )));
    }

    let mut report = BenchmarkReport {
        n: metric.len() + choices.len(),
        values: BTreeMap::new(),
    };
    for s in stats {
        match s {
            Statistic::KendallB => {
                report
                    .values
                    .insert("tau_b".into(), kendall_tau(&metric, &human, TauVariant::B)?);
            }
            Statistic::KendallC => {
                report
                    .values
                    .insert("tau_c".into(), kendall_tau(&metric, &human, TauVariant::C)?);
            }
            Statistic::Pearson => {
                report
                    .values
                    .insert("pearson".into(), pearson(&metric, &human)?);
            }
            Statistic::PascalAccuracy => {
                let acc = pascal_accuracy(&choices)?;
                for (sub, v) in &acc.per_subset {
                    report.values.insert(format!("pascal_{sub:?}"), *v);
                }
                report.values.insert("pascal_mean".into(), acc.mean);
            }
        }
    }
    Ok(report)
}

/// Gold token annotations for one scored pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapTokenGold {
    pub image_id: String,
    pub caption_idx: usize,
    pub tokens: Vec<String>,
    pub pos: Vec<String>,
    pub bad_word_idx: Vec<usize>,
    pub mentioned_region_idx: Vec<usize>,
}

/// Joins score reports with gold annotations on `(image_id, caption_idx)`.
pub fn run_captoken_benchmark(
    reports: &[ScoreReport],
    gold: &[CapTokenGold],
    eval_pos: &PosSet,
) -> Result<BenchmarkReport> {
    let mut by_key = BTreeMap::new();
    for r in reports {
        let (Some(id), Some(c)) = (r.image_id.as_deref(), r.caption_idx) else {
            return Err(Error::Schema(
                "score report lacks image_id or caption_idx".into(),
            ));
        };
        by_key.insert((id, c), r);
    }
    let mut judgments = Vec::with_capacity(gold.len());
    let mut problems = Vec::new();
    for g in gold {
        match by_key.get(&(g.image_id.as_str(), g.caption_idx)) {
            Some(r) if r.tokens == g.tokens => judgments.push(TokenJudgment::from_report(
                r,
                &g.pos,
                &g.bad_word_idx,
                &g.mentioned_region_idx,
                eval_pos,
            )?),
            Some(_) => problems.push(format!("{}#{}: tokens differ", g.image_id, g.caption_idx)),
            None => problems.push(format!("{}#{}: no report", g.image_id, g.caption_idx)),
        }
    }
    if !problems.is_empty() {
        return Err(Error::Schema(problems.join("; ")));
    }
    let acc = captoken_accuracy(&judgments)?;
    let mut values = BTreeMap::new();
    values.insert("vision_accuracy".into(), acc.vision);
    values.insert("text_accuracy".into(), acc.text);
    Ok(BenchmarkReport {
        n: judgments.len(),
        values,
    })
}
