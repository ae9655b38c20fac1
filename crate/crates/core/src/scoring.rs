//! Fine-grained scoring: token-level attention scores, the vision recall,
//! text precision and overall scores, thresholded token decisions, and the
//! CLIP-S / InfoCLIP baselines.

use image::RgbImage;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::encoding::{
    extract_caption_tokens, extract_image_tokens, CaptionTokenFeatures, EmbeddingBackbone,
    ImageTokenFeatures, RegionSet, TaggedCaption,
};
use crate::error::{Error, Result};
use crate::fusion::{encode_text, encode_vision, fuse_encoded, FusedVars, Mode};
use crate::model::{Bound, Model};

/// Inference threshold on token-level scores.
pub const DEFAULT_BETA: f64 = 0.1;

/// Learned cross-attention projections and the shared temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoringParams {
    pub wq_v: Array2<f64>,
    pub wk_v: Array2<f64>,
    pub wq_t: Array2<f64>,
    pub wk_t: Array2<f64>,
    pub tau: f64,
}

impl ScoringParams {
    pub fn from_model(model: &Model) -> Self {
        let get = |n: &str| model.params.get(n).expect("scoring parameter").clone();
        Self {
            wq_v: get("scoring.wq_v"),
            wk_v: get("scoring.wk_v"),
            wq_t: get("scoring.wq_t"),
            wk_t: get("scoring.wk_t"),
            tau: model.tau(),
        }
    }
}

/// Softmax-normalized token-level scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenScores {
    /// `m + 1` entries; the last one belongs to the null token.
    pub alpha_v: Vec<f64>,
    pub alpha_t: Vec<f64>,
}

impl TokenScores {
    pub fn null_score(&self) -> f64 {
        *self.alpha_v.last().expect("null entry present")
    }

    pub fn region_scores(&self) -> &[f64] {
        &self.alpha_v[..self.alpha_v.len() - 1]
    }
}

fn row(v: ArrayView1<f64>) -> Array2<f64> {
    v.to_owned().insert_axis(ndarray::Axis(0))
}

fn check_cols(what: &str, m: ArrayView2<f64>, d: usize) -> Result<()> {
    if m.ncols() != d {
        return Err(Error::DimensionMismatch(format!(
            "{what} has dim {}, expected {d}",
            m.ncols()
        )));
    }
    Ok(())
}

/// `softmax_k((query Wq) . (keys_k Wk))` as a `1 x k` node.
pub(crate) fn attention(g: &mut Graph, query: Var, keys: Var, wq: Var, wk: Var) -> Var {
    let q = g.matmul(query, wq);
    let k = g.matmul(keys, wk);
    let kt = g.transpose(k);
    let s = g.matmul(q, kt);
    g.softmax_rows(s)
}

/// `cos(alpha . feats, anchor) / tau` as a `1 x 1` node.
pub(crate) fn conditioned_score(
    g: &mut Graph,
    alpha: Var,
    feats: Var,
    anchor: Var,
    tau: Var,
) -> Result<Var> {
    let pooled = g.matmul(alpha, feats);
    if g.value(pooled).iter().all(|&v| v == 0.0) {
        return Err(Error::DegenerateFeature);
    }
    if g.value(anchor).iter().all(|&v| v == 0.0) {
        return Err(Error::ZeroVector);
    }
    let c = g.cosine(pooled, anchor);
    Ok(g.div_scalar(c, tau))
}

/// Graph outputs of scoring one pair.
#[derive(Clone, Copy, Debug)]
pub(crate) struct PairVars {
    pub alpha_v: Var,
    pub alpha_t: Var,
    pub recall: Var,
    pub precision: Var,
}

pub(crate) fn score_fused(
    g: &mut Graph,
    p: &Bound,
    fused: &FusedVars,
    v_g: Var,
    t_g: Var,
) -> Result<PairVars> {
    let alpha_v = attention(
        g,
        t_g,
        fused.vision,
        p.get("scoring.wq_v"),
        p.get("scoring.wk_v"),
    );
    let alpha_t = attention(
        g,
        v_g,
        fused.text,
        p.get("scoring.wq_t"),
        p.get("scoring.wk_t"),
    );
    let tau = p.get("scoring.tau");
    let recall = conditioned_score(g, alpha_v, fused.vision, v_g, tau)?;
    let precision = conditioned_score(g, alpha_t, fused.text, t_g, tau)?;
    Ok(PairVars {
        alpha_v,
        alpha_t,
        recall,
        precision,
    })
}

/// Intra-encoded vision tokens plus the raw global anchor for one image.
pub(crate) struct EncodedImage {
    pub seq: Var,
    pub global: Var,
    pub regions: usize,
}

pub(crate) struct EncodedCaption {
    pub seq: Var,
    pub global: Var,
}

pub(crate) fn encode_image_vars(
    g: &mut Graph,
    p: &Bound,
    model: &Model,
    img: &ImageTokenFeatures,
    mode: &mut Mode,
) -> Result<EncodedImage> {
    let seq = encode_vision(g, p, &model.config.fusion, img, mode)?;
    let global = g.row(img.global_feat.as_slice().expect("contiguous"));
    Ok(EncodedImage {
        seq,
        global,
        regions: img.num_regions(),
    })
}

pub(crate) fn encode_caption_vars(
    g: &mut Graph,
    p: &Bound,
    model: &Model,
    cap: &CaptionTokenFeatures,
    mode: &mut Mode,
) -> Result<EncodedCaption> {
    let seq = encode_text(g, p, &model.config.fusion, cap, mode)?;
    let global = g.row(cap.global_feat.as_slice().expect("contiguous"));
    Ok(EncodedCaption { seq, global })
}

/// Fuses an encoded image with an encoded caption and scores the pair.
pub(crate) fn score_encoded(
    g: &mut Graph,
    p: &Bound,
    model: &Model,
    img: &EncodedImage,
    cap: &EncodedCaption,
    mode: &mut Mode,
) -> Result<PairVars> {
    let fused = fuse_encoded(g, p, &model.config.fusion, img.seq, cap.seq, mode);
    debug_assert_eq!(g.value(fused.vision).nrows(), img.regions + 1);
    score_fused(g, p, &fused, img.global, cap.global)
}

/// `alpha_v` over the `m + 1` fused vision tokens, queried by `t_g`.
pub fn vision_token_scores(
    t_g: ArrayView1<f64>,
    vision_out: ArrayView2<f64>,
    params: &ScoringParams,
) -> Result<Vec<f64>> {
    token_scores(t_g, vision_out, &params.wq_v, &params.wk_v)
}

/// `alpha_t` over the `n` fused text tokens, queried by `v_g`.
pub fn text_token_scores(
    v_g: ArrayView1<f64>,
    text_out: ArrayView2<f64>,
    params: &ScoringParams,
) -> Result<Vec<f64>> {
    token_scores(v_g, text_out, &params.wq_t, &params.wk_t)
}

fn token_scores(
    query: ArrayView1<f64>,
    keys: ArrayView2<f64>,
    wq: &Array2<f64>,
    wk: &Array2<f64>,
) -> Result<Vec<f64>> {
    let d = wq.nrows();
    if query.len() != d {
        return Err(Error::DimensionMismatch(format!(
            "query has dim {}, expected {d}",
            query.len()
        )));
    }
    check_cols("token features", keys, d)?;
    if keys.nrows() == 0 {
        return Err(Error::InvalidArgument("no tokens to score".into()));
    }
    let mut g = Graph::new();
    let q = g.constant(row(query));
    let k = g.constant(keys.to_owned());
    let wq = g.constant_ref(wq);
    let wk = g.constant_ref(wk);
    let a = attention(&mut g, q, k, wq, wk);
    Ok(g.value(a).row(0).to_vec())
}

fn weighted_cosine(
    alpha: &[f64],
    feats: ArrayView2<f64>,
    anchor: ArrayView1<f64>,
    tau: f64,
) -> Result<f64> {
    if alpha.len() != feats.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "{} scores for {} tokens",
            alpha.len(),
            feats.nrows()
        )));
    }
    check_cols("token features", feats, anchor.len())?;
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::InvalidArgument(
            "temperature must be positive".into(),
        ));
    }
    let mut g = Graph::new();
    let a = g.row(alpha);
    let f = g.constant(feats.to_owned());
    let anchor = g.constant(row(anchor));
    let t = g.constant(Array2::from_elem((1, 1), tau));
    let s = conditioned_score(&mut g, a, f, anchor, t)?;
    Ok(g.scalar(s))
}

/// `cos(sum_k alpha_v[k] V̂[k], v_g) / tau`.
pub fn recall_score(
    alpha_v: &[f64],
    vision_out: ArrayView2<f64>,
    v_g: ArrayView1<f64>,
    tau: f64,
) -> Result<f64> {
    weighted_cosine(alpha_v, vision_out, v_g, tau)
}

/// `cos(sum_i alpha_t[i] T̂[i], t_g) / tau`.
pub fn precision_score(
    alpha_t: &[f64],
    text_out: ArrayView2<f64>,
    t_g: ArrayView1<f64>,
    tau: f64,
) -> Result<f64> {
    weighted_cosine(alpha_t, text_out, t_g, tau)
}

pub fn overall_score(recall: f64, precision: f64) -> f64 {
    recall + precision
}

fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} vs {}",
            a.len(),
            b.len()
        )));
    }
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(a.dot(&b) / (na * nb))
}

/// Overall score plus the backbone's own global similarity.
pub fn plus_score(
    overall: f64,
    v_g: ArrayView1<f64>,
    t_g: ArrayView1<f64>,
    logit_temperature: Option<f64>,
) -> Result<f64> {
    let temp = logit_temperature.ok_or(Error::MissingTemperature)?;
    if temp.is_nan() || temp <= 0.0 {
        return Err(Error::InvalidArgument(
            "logit temperature must be positive".into(),
        ));
    }
    Ok(overall + cosine(v_g, t_g)? / temp)
}

/// Thresholded judgments derived from token scores.
#[derive(Clone, Debug, PartialEq)]
pub struct Decisions {
    /// `Some(correct)` for semantic tokens, `None` for the rest.
    pub correct_words: Vec<Option<bool>>,
    pub mentioned_regions: Vec<bool>,
    /// The null token took more than `beta`: the caption is judged irrelevant.
    pub null_flag: bool,
}

/// Semantic token `i` is correct iff `alpha_t[i] > beta`; region `k` is
/// mentioned iff `alpha_v[k] > beta`.
pub fn token_decisions(
    scores: &TokenScores,
    semantic_mask: &[bool],
    beta: f64,
) -> Result<Decisions> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "beta must lie in (0, 1), got {beta}"
        )));
    }
    if semantic_mask.len() != scores.alpha_t.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} mask entries for {} text scores",
            semantic_mask.len(),
            scores.alpha_t.len()
        )));
    }
    Ok(Decisions {
        correct_words: scores
            .alpha_t
            .iter()
            .zip(semantic_mask)
            .map(|(&a, &s)| s.then_some(a > beta))
            .collect(),
        mentioned_regions: scores.region_scores().iter().map(|&a| a > beta).collect(),
        null_flag: scores.null_score() > beta,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordJudgment {
    pub idx: usize,
    pub token: String,
    pub score: f64,
    pub ok: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionJudgment {
    pub idx: usize,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub score: f64,
    pub mentioned: bool,
}

/// Everything reported for one (image, caption) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption_idx: Option<usize>,
    pub precision: f64,
    pub recall: f64,
    pub overall: f64,
    pub plus: Option<f64>,
    pub alpha_v: Vec<f64>,
    pub alpha_t: Vec<f64>,
    pub null_score: f64,
    pub null_flag: bool,
    pub beta: f64,
    pub tokens: Vec<String>,
    pub semantic_mask: Vec<bool>,
    pub correct_words: Vec<WordJudgment>,
    pub regions: Vec<RegionJudgment>,
}

impl ScoreReport {
    fn build(
        recall: f64,
        precision: f64,
        plus: Option<f64>,
        scores: TokenScores,
        cap: &CaptionTokenFeatures,
        boxes: &[[f64; 4]],
        beta: f64,
    ) -> Result<Self> {
        let mut report = ScoreReport {
            image_id: None,
            caption_idx: None,
            precision,
            recall,
            overall: overall_score(recall, precision),
            plus,
            null_score: scores.null_score(),
            null_flag: false,
            alpha_v: scores.alpha_v,
            alpha_t: scores.alpha_t,
            beta,
            tokens: cap.tokens.clone(),
            semantic_mask: cap.semantic_mask.clone(),
            correct_words: Vec::new(),
            regions: boxes
                .iter()
                .enumerate()
                .map(|(idx, b)| RegionJudgment {
                    idx,
                    bbox: *b,
                    score: 0.0,
                    mentioned: false,
                })
                .collect(),
        };
        report.rethreshold(beta)?;
        Ok(report)
    }

    pub fn token_scores(&self) -> TokenScores {
        TokenScores {
            alpha_v: self.alpha_v.clone(),
            alpha_t: self.alpha_t.clone(),
        }
    }

    /// Recomputes every decision at a new threshold; scores are untouched.
    pub fn rethreshold(&mut self, beta: f64) -> Result<()> {
        let dec = token_decisions(&self.token_scores(), &self.semantic_mask, beta)?;
        self.beta = beta;
        self.null_flag = dec.null_flag;
        self.correct_words = dec
            .correct_words
            .iter()
            .enumerate()
            .filter_map(|(idx, ok)| {
                ok.map(|ok| WordJudgment {
                    idx,
                    token: self.tokens[idx].clone(),
                    score: self.alpha_t[idx],
                    ok,
                })
            })
            .collect();
        for (r, mentioned) in self.regions.iter_mut().zip(dec.mentioned_regions) {
            r.score = self.alpha_v[r.idx];
            r.mentioned = mentioned;
        }
        Ok(())
    }

    pub fn mentioned_region_mask(&self) -> Vec<bool> {
        self.regions.iter().map(|r| r.mentioned).collect()
    }

    /// Per-token correctness, `None` for non-semantic tokens.
    pub fn correct_word_mask(&self) -> Vec<Option<bool>> {
        let mut out = vec![None; self.tokens.len()];
        for w in &self.correct_words {
            out[w.idx] = Some(w.ok);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoreOptions {
    pub beta: f64,
    /// Also compute the plus score (needs a backbone temperature).
    pub plus: bool,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        Self {
            beta: DEFAULT_BETA,
            plus: false,
        }
    }
}

/// Scores pre-extracted token features with a trained model (eval mode).
pub fn score_features(
    model: &Model,
    img: &ImageTokenFeatures,
    cap: &CaptionTokenFeatures,
    boxes: &[[f64; 4]],
    logit_temperature: Option<f64>,
    opts: ScoreOptions,
) -> Result<ScoreReport> {
    if boxes.len() != img.num_regions() {
        return Err(Error::DimensionMismatch(format!(
            "{} boxes for {} regions",
            boxes.len(),
            img.num_regions()
        )));
    }
    let plus_temp = if opts.plus {
        Some(logit_temperature.ok_or(Error::MissingTemperature)?)
    } else {
        None
    };
    let mut g = Graph::new();
    let p = model.bind_constants(&mut g);
    let mut mode = Mode::Eval;
    let ei = encode_image_vars(&mut g, &p, model, img, &mut mode)?;
    let ec = encode_caption_vars(&mut g, &p, model, cap, &mut mode)?;
    let out = score_encoded(&mut g, &p, model, &ei, &ec, &mut mode)?;
    let recall = g.scalar(out.recall);
    let precision = g.scalar(out.precision);
    let scores = TokenScores {
        alpha_v: g.value(out.alpha_v).row(0).to_vec(),
        alpha_t: g.value(out.alpha_t).row(0).to_vec(),
    };
    let plus = plus_temp
        .map(|t| {
            plus_score(
                overall_score(recall, precision),
                img.global_feat.view(),
                cap.global_feat.view(),
                Some(t),
            )
        })
        .transpose()?;
    ScoreReport::build(recall, precision, plus, scores, cap, boxes, opts.beta)
}

/// Full pipeline: encode, fuse, score, threshold.
pub fn score_pair(
    image: &RgbImage,
    regions: &RegionSet,
    caption: &TaggedCaption,
    model: &Model,
    backbone: &dyn EmbeddingBackbone,
    opts: ScoreOptions,
) -> Result<ScoreReport> {
    if opts.plus && backbone.logit_temperature().is_none() {
        return Err(Error::MissingTemperature);
    }
    let img = extract_image_tokens(image, regions, backbone)?;
    let cap = extract_caption_tokens(caption, backbone, &model.config.eval_pos)?;
    score_features(
        model,
        &img,
        &cap,
        &regions.boxes,
        backbone.logit_temperature(),
        opts,
    )
}

/// `w * max(cos(v_g, t_g), 0)`.
pub fn baseline_clip_s(v_g: ArrayView1<f64>, t_g: ArrayView1<f64>, w: f64) -> Result<f64> {
    Ok(w * cosine(v_g, t_g)?.max(0.0))
}

/// Fine-grained scoring on raw backbone tokens: dot-product attention, unit
/// temperature, no learned parameters.
pub fn baseline_infoclip(
    img: &ImageTokenFeatures,
    cap: &CaptionTokenFeatures,
    boxes: &[[f64; 4]],
    beta: f64,
) -> Result<ScoreReport> {
    let d = img.dim();
    if cap.dim() != d {
        return Err(Error::DimensionMismatch(format!(
            "image dim {d}, caption dim {}",
            cap.dim()
        )));
    }
    let mut vision = Array2::zeros((img.num_regions() + 1, d));
    vision
        .slice_mut(ndarray::s![..img.num_regions(), ..])
        .assign(&img.region_feats);
    vision.row_mut(img.num_regions()).assign(&img.null_feat);
    let eye = Array2::eye(d);
    let identity = ScoringParams {
        wq_v: eye.clone(),
        wk_v: eye.clone(),
        wq_t: eye.clone(),
        wk_t: eye,
        tau: 1.0,
    };
    let alpha_v = vision_token_scores(cap.global_feat.view(), vision.view(), &identity)?;
    let alpha_t = text_token_scores(img.global_feat.view(), cap.token_feats.view(), &identity)?;
    let recall = recall_score(&alpha_v, vision.view(), img.global_feat.view(), 1.0)?;
    let precision = precision_score(
        &alpha_t,
        cap.token_feats.view(),
        cap.global_feat.view(),
        1.0,
    )?;
    ScoreReport::build(
        recall,
        precision,
        None,
        TokenScores { alpha_v, alpha_t },
        cap,
        boxes,
        beta,
    )
}

/// Exposes the conditioned vision feature for diagnostics.
pub fn conditioned_feature(alpha: &[f64], feats: ArrayView2<f64>) -> Array1<f64> {
    Array1::from_vec(alpha.to_vec()).dot(&feats)
}
