//! Multi-task training: in-batch NCE on recall and precision, the hard
//! textual negative loss and token-level cross-entropy, alternated 3:1.

use std::collections::{BTreeMap, BTreeSet};

use image::RgbImage;
use ndarray::{Array2, ArrayView2};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::datagen::{derive_seed, TrainingSets};
use crate::dataset::DatasetRecord;
use crate::encoding::{
    extract_caption_tokens, extract_image_tokens, CaptionTokenFeatures, EmbeddingBackbone,
    ImageTokenFeatures, PosSet,
};
use crate::error::{Error, Result};
use crate::fusion::Mode;
use crate::model::{Bound, Model};
use crate::scoring::{
    encode_caption_vars, encode_image_vars, score_encoded, EncodedCaption, EncodedImage,
};

/// Clamp applied inside token-loss logarithms.
pub const LOG_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub total_iters: usize,
    pub coarse_steps: usize,
    pub fine_steps: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub use_htn: bool,
    pub use_fine: bool,
    pub log_every: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            lr: 1e-4,
            total_iters: 32_000,
            coarse_steps: 3,
            fine_steps: 1,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            use_htn: true,
            use_fine: true,
            log_every: 10,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Laptop-scale preset used by the acceptance suite.
    pub fn desk(seed: u64) -> Self {
        Self {
            batch_size: 8,
            lr: 3e-3,
            total_iters: 2000,
            seed,
            log_every: 10,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if self.coarse_steps == 0 {
            return bad("coarse_steps must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1)
            || !(0.0..1.0).contains(&self.adam_beta2)
            || self.adam_eps <= 0.0
        {
            return bad("invalid optimizer hyperparameters");
        }
        Ok(())
    }

    /// Task of 0-based step `iter`.
    pub fn task_at(&self, iter: usize) -> Task {
        let period = self.coarse_steps + self.fine_steps;
        if self.use_fine && self.fine_steps > 0 && iter % period >= self.coarse_steps {
            Task::Fine
        } else {
            Task::Coarse
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Coarse,
    Fine,
}

// ---------------------------------------------------------------------------
// Value-level losses

/// Mean of the row-wise and column-wise in-batch NCE on a square score
/// matrix whose diagonal holds the positive pairs.
pub fn nce_loss(scores: ArrayView2<f64>) -> Result<f64> {
    let b = scores.nrows();
    if b == 0 || scores.ncols() != b {
        return Err(Error::InvalidArgument(format!(
            "score matrix must be square and non-empty, got {:?}",
            scores.dim()
        )));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("score matrix".into()));
    }
    let lse = |it: &mut dyn Iterator<Item = f64>| {
        let v: Vec<f64> = it.collect();
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    };
    let mut li = 0.0;
    let mut lc = 0.0;
    for i in 0..b {
        li += lse(&mut scores.row(i).iter().copied()) - scores[[i, i]];
        lc += lse(&mut scores.column(i).iter().copied()) - scores[[i, i]];
    }
    Ok((li + lc) / (2.0 * b as f64))
}

/// `softplus(f_neg - f_pos)`.
pub fn htn_loss(f_pos: f64, f_neg: f64) -> f64 {
    let x = f_neg - f_pos;
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// A token loss and how many log arguments were clamped.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TokenLoss {
    pub loss: f64,
    pub clamped: usize,
}

fn clamped_nll(alpha: &[f64], positives: impl Iterator<Item = usize>, norm: f64) -> TokenLoss {
    let mut sum = 0.0;
    let mut clamped = 0;
    for i in positives {
        if alpha[i] < LOG_EPS {
            clamped += 1;
        }
        sum -= alpha[i].max(LOG_EPS).ln();
    }
    TokenLoss {
        loss: sum / norm,
        clamped,
    }
}

/// `-(1/n_s) * sum over Y=1 of ln alpha_t`, with `n_s` the number of labelled
/// (0 or 1) tokens.
pub fn fine_text_loss(alpha_t: &[f64], y_t: &[i8]) -> Result<TokenLoss> {
    if alpha_t.len() != y_t.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} scores for {} labels",
            alpha_t.len(),
            y_t.len()
        )));
    }
    let n_s = y_t.iter().filter(|&&y| y == 0 || y == 1).count();
    if n_s == 0 {
        return Err(Error::NoSemanticWords);
    }
    Ok(clamped_nll(
        alpha_t,
        (0..y_t.len()).filter(|&i| y_t[i] == 1),
        n_s as f64,
    ))
}

/// `-(1/m) * sum over Y=1 of ln alpha_v`; `alpha_v` and `y_v` hold `m`
/// regions followed by the null entry.
pub fn fine_vision_loss(alpha_v: &[f64], y_v: &[u8]) -> Result<TokenLoss> {
    if alpha_v.len() != y_v.len() || alpha_v.len() < 2 {
        return Err(Error::DimensionMismatch(format!(
            "{} scores for {} labels",
            alpha_v.len(),
            y_v.len()
        )));
    }
    let m = alpha_v.len() - 1;
    Ok(clamped_nll(
        alpha_v,
        (0..m).filter(|&k| y_v[k] == 1),
        m as f64,
    ))
}

// ---------------------------------------------------------------------------
// Graph-level losses

fn graph_nce(g: &mut Graph, rows: &[Vec<Var>]) -> Var {
    let b = rows.len();
    let row_vars: Vec<Var> = rows.iter().map(|r| g.concat_cols(r)).collect();
    let s = g.concat_rows(&row_vars);
    let lr = g.log_softmax_rows(s);
    let st = g.transpose(s);
    let lc = g.log_softmax_rows(st);
    let mut diag = Vec::with_capacity(2 * b);
    for i in 0..b {
        diag.push(g.pick(lr, i, i));
        diag.push(g.pick(lc, i, i));
    }
    let total = g.add_scalars(&diag);
    g.scale(total, -1.0 / (2.0 * b as f64))
}

fn graph_htn(g: &mut Graph, f_pos: Var, f_neg: Var) -> Var {
    let pair = g.concat_cols(&[f_pos, f_neg]);
    let ls = g.log_softmax_rows(pair);
    let l = g.pick(ls, 0, 0);
    g.scale(l, -1.0)
}

/// `-sum(weights * ln alpha)` for a `1 x n` attention row.
fn graph_weighted_nll(g: &mut Graph, alpha: Var, weights: Vec<f64>) -> Var {
    let n = weights.len();
    let w = g.constant(Array2::from_shape_vec((1, n), weights).expect("row shape"));
    let ln = g.ln_clamp(alpha, LOG_EPS);
    let prod = g.mul(ln, w);
    let s = g.sum(prod);
    g.scale(s, -1.0)
}

// ---------------------------------------------------------------------------
// Data

/// One image with its extracted tokens and all of its captions.
#[derive(Clone, Debug)]
pub struct ImageEntry {
    pub image_id: String,
    pub features: ImageTokenFeatures,
    pub captions: Vec<CaptionTokenFeatures>,
}

#[derive(Clone, Debug)]
pub struct FineTextSample {
    pub image: usize,
    pub caption: CaptionTokenFeatures,
    pub labels: Vec<i8>,
}

#[derive(Clone, Debug)]
pub struct FineVisionSample {
    pub image: usize,
    pub caption: usize,
    pub labels: Vec<u8>,
}

/// Pre-extracted features for every training collection.
#[derive(Clone, Debug, Default)]
pub struct TrainingData {
    pub images: Vec<ImageEntry>,
    /// `(image, caption)`
    pub coarse: Vec<(usize, usize)>,
    /// `(image, positive caption)` to hard negative captions.
    pub htn: BTreeMap<(usize, usize), Vec<usize>>,
    pub fine_text: Vec<FineTextSample>,
    pub fine_vision: Vec<FineVisionSample>,
}

impl TrainingData {
    /// Extracts backbone features for every image referenced by `sets`.
    pub fn build(
        records: &[DatasetRecord],
        sets: &TrainingSets,
        backbone: &dyn EmbeddingBackbone,
        semantic: &PosSet,
        mut load_image: impl FnMut(&DatasetRecord) -> Result<RgbImage>,
    ) -> Result<Self> {
        let by_id: BTreeMap<&str, &DatasetRecord> =
            records.iter().map(|r| (r.image_id.as_str(), r)).collect();
        let ids: BTreeSet<&str> = sets
            .coarse
            .iter()
            .map(|p| p.image_id.as_str())
            .chain(sets.htn.iter().map(|t| t.image_id.as_str()))
            .chain(sets.fine_text.iter().map(|t| t.image_id.as_str()))
            .chain(sets.fine_vision.iter().map(|t| t.image_id.as_str()))
            .collect();

        let mut data = TrainingData::default();
        let mut index = BTreeMap::new();
        for id in ids {
            let r = by_id.get(id).ok_or_else(|| {
                Error::Schema(format!("training sets refer to unknown image {id}"))
            })?;
            let image = load_image(r)?;
            let regions = r.regions(image.dimensions())?;
            let features = extract_image_tokens(&image, &regions, backbone)?;
            let captions = r
                .captions
                .iter()
                .map(|c| extract_caption_tokens(&c.tagged()?, backbone, semantic))
                .collect::<Result<Vec<_>>>()?;
            index.insert(id.to_string(), data.images.len());
            data.images.push(ImageEntry {
                image_id: id.to_string(),
                features,
                captions,
            });
        }

        let lookup = |id: &str, cap: usize| -> Result<usize> {
            let i = index[id];
            if cap >= data.images[i].captions.len() {
                return Err(Error::Schema(format!("{id} has no caption {cap}")));
            }
            Ok(i)
        };
        let mut coarse = Vec::new();
        for p in &sets.coarse {
            coarse.push((lookup(&p.image_id, p.caption_idx)?, p.caption_idx));
        }
        let mut htn: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for t in &sets.htn {
            let i = lookup(&t.image_id, t.pos_idx)?;
            lookup(&t.image_id, t.neg_idx)?;
            htn.entry((i, t.pos_idx)).or_default().push(t.neg_idx);
        }
        let mut fine_text = Vec::new();
        for f in &sets.fine_text {
            let i = lookup(&f.image_id, f.caption_idx)?;
            let caption = extract_caption_tokens(&f.caption()?, backbone, semantic)?;
            let labels = f.y_t[..caption.len()].to_vec();
            if labels.contains(&1) {
                fine_text.push(FineTextSample {
                    image: i,
                    caption,
                    labels,
                });
            }
        }
        let mut fine_vision = Vec::new();
        for f in &sets.fine_vision {
            let i = lookup(&f.image_id, f.caption_idx)?;
            if f.y_v.len() != data.images[i].features.num_regions() + 1 {
                return Err(Error::Schema(format!(
                    "{}: Y_v length does not match regions",
                    f.image_id
                )));
            }
            fine_vision.push(FineVisionSample {
                image: i,
                caption: f.caption_idx,
                labels: f.y_v.clone(),
            });
        }
        data.coarse = coarse;
        data.htn = htn;
        data.fine_text = fine_text;
        data.fine_vision = fine_vision;
        Ok(data)
    }
}

/// Concrete indices of one coarse step.
#[derive(Clone, Debug, PartialEq)]
pub struct CoarseBatch {
    /// `(image, caption)`; images are distinct.
    pub pairs: Vec<(usize, usize)>,
    /// Sampled hard negative caption for each pair, when one exists.
    pub negatives: Vec<Option<usize>>,
}

/// Concrete indices of one fine step.
#[derive(Clone, Debug, PartialEq)]
pub struct FineBatch {
    pub text: Vec<usize>,
    pub vision: Vec<usize>,
}

fn sample_coarse(
    data: &TrainingData,
    b: usize,
    use_htn: bool,
    rng: &mut ChaCha8Rng,
) -> CoarseBatch {
    let n_images: BTreeSet<usize> = data.coarse.iter().map(|p| p.0).collect();
    let b = b.min(n_images.len());
    let mut seen = BTreeSet::new();
    let mut pairs = Vec::with_capacity(b);
    while pairs.len() < b {
        let p = data.coarse[rng.random_range(0..data.coarse.len())];
        if seen.insert(p.0) {
            pairs.push(p);
        }
    }
    let negatives = pairs
        .iter()
        .map(|p| {
            if use_htn {
                data.htn.get(p).and_then(|n| n.choose(rng).copied())
            } else {
                None
            }
        })
        .collect();
    CoarseBatch { pairs, negatives }
}

fn sample_fine(data: &TrainingData, b: usize, rng: &mut ChaCha8Rng) -> FineBatch {
    let mut draw = |n: usize| -> Vec<usize> {
        if n == 0 {
            Vec::new()
        } else {
            (0..b).map(|_| rng.random_range(0..n)).collect()
        }
    };
    FineBatch {
        text: draw(data.fine_text.len()),
        vision: draw(data.fine_vision.len()),
    }
}

struct CoarseVars {
    l_r: Var,
    l_p: Var,
    l_htn: Option<Var>,
}

fn coarse_losses(
    g: &mut Graph,
    p: &Bound,
    model: &Model,
    data: &TrainingData,
    batch: &CoarseBatch,
    mode: &mut Mode,
) -> Result<CoarseVars> {
    let b = batch.pairs.len();
    let mut imgs: Vec<EncodedImage> = Vec::with_capacity(b);
    let mut caps: Vec<EncodedCaption> = Vec::with_capacity(b);
    for &(i, c) in &batch.pairs {
        imgs.push(encode_image_vars(
            g,
            p,
            model,
            &data.images[i].features,
            mode,
        )?);
        caps.push(encode_caption_vars(
            g,
            p,
            model,
            &data.images[i].captions[c],
            mode,
        )?);
    }
    let mut rec = vec![Vec::with_capacity(b); b];
    let mut pre = vec![Vec::with_capacity(b); b];
    for (i, img) in imgs.iter().enumerate() {
        for cap in &caps {
            let out = score_encoded(g, p, model, img, cap, mode)?;
            rec[i].push(out.recall);
            pre[i].push(out.precision);
        }
    }
    let l_r = graph_nce(g, &rec);
    let l_p = graph_nce(g, &pre);

    let mut htn_terms = Vec::new();
    for (k, neg) in batch.negatives.iter().enumerate() {
        if let Some(&n) = neg.as_ref() {
            let (i, _) = batch.pairs[k];
            let enc = encode_caption_vars(g, p, model, &data.images[i].captions[n], mode)?;
            let out = score_encoded(g, p, model, &imgs[k], &enc, mode)?;
            htn_terms.push(graph_htn(g, rec[k][k], out.recall));
        }
    }
    let l_htn = if htn_terms.is_empty() {
        None
    } else {
        let s = g.add_scalars(&htn_terms);
        Some(g.scale(s, 1.0 / htn_terms.len() as f64))
    };
    Ok(CoarseVars { l_r, l_p, l_htn })
}

struct FineVars {
    l_tok_t: Option<Var>,
    l_tok_v: Option<Var>,
}

fn mean_of(g: &mut Graph, terms: &[Var]) -> Option<Var> {
    if terms.is_empty() {
        return None;
    }
    let s = g.add_scalars(terms);
    Some(g.scale(s, 1.0 / terms.len() as f64))
}

fn fine_losses(
    g: &mut Graph,
    p: &Bound,
    model: &Model,
    data: &TrainingData,
    batch: &FineBatch,
    mode: &mut Mode,
) -> Result<FineVars> {
    let mut text_terms = Vec::new();
    for &s in &batch.text {
        let sample = &data.fine_text[s];
        let img = encode_image_vars(g, p, model, &data.images[sample.image].features, mode)?;
        let cap = encode_caption_vars(g, p, model, &sample.caption, mode)?;
        let out = score_encoded(g, p, model, &img, &cap, mode)?;
        let n_s = sample.labels.iter().filter(|&&y| y == 0 || y == 1).count() as f64;
        let w = sample
            .labels
            .iter()
            .map(|&y| if y == 1 { 1.0 / n_s } else { 0.0 })
            .collect();
        text_terms.push(graph_weighted_nll(g, out.alpha_t, w));
    }
    let mut vision_terms = Vec::new();
    for &s in &batch.vision {
        let sample = &data.fine_vision[s];
        let entry = &data.images[sample.image];
        let img = encode_image_vars(g, p, model, &entry.features, mode)?;
        let cap = encode_caption_vars(g, p, model, &entry.captions[sample.caption], mode)?;
        let out = score_encoded(g, p, model, &img, &cap, mode)?;
        let m = entry.features.num_regions() as f64;
        let mut w: Vec<f64> = sample
            .labels
            .iter()
            .map(|&y| if y == 1 { 1.0 / m } else { 0.0 })
            .collect();
        *w.last_mut().expect("null entry") = 0.0;
        vision_terms.push(graph_weighted_nll(g, out.alpha_v, w));
    }
    Ok(FineVars {
        l_tok_t: mean_of(g, &text_terms),
        l_tok_v: mean_of(g, &vision_terms),
    })
}

// ---------------------------------------------------------------------------
// Objectives for gradient checking

/// A single loss term evaluated on a fixed batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// `l_r + l_p`
    Nce,
    Htn,
    FineText,
    FineVision,
}

/// Fixed batch for [`objective_loss`].
#[derive(Clone, Debug, PartialEq)]
pub enum Batch {
    Coarse(CoarseBatch),
    Fine(FineBatch),
}

fn objective_var(
    g: &mut Graph,
    p: &Bound,
    model: &Model,
    data: &TrainingData,
    batch: &Batch,
    objective: Objective,
) -> Result<Var> {
    let mut mode = Mode::Eval;
    let missing = || Error::InvalidArgument(format!("batch has no terms for {objective:?}"));
    match (objective, batch) {
        (Objective::Nce, Batch::Coarse(b)) => {
            let v = coarse_losses(g, p, model, data, b, &mut mode)?;
            Ok(g.add(v.l_r, v.l_p))
        }
        (Objective::Htn, Batch::Coarse(b)) => coarse_losses(g, p, model, data, b, &mut mode)?
            .l_htn
            .ok_or_else(missing),
        (Objective::FineText, Batch::Fine(b)) => fine_losses(g, p, model, data, b, &mut mode)?
            .l_tok_t
            .ok_or_else(missing),
        (Objective::FineVision, Batch::Fine(b)) => fine_losses(g, p, model, data, b, &mut mode)?
            .l_tok_v
            .ok_or_else(missing),
        _ => Err(Error::InvalidArgument(format!(
            "{objective:?} does not apply to this batch"
        ))),
    }
}

/// Loss value of `objective` in eval mode.
pub fn objective_loss(
    model: &Model,
    data: &TrainingData,
    batch: &Batch,
    objective: Objective,
) -> Result<f64> {
    let mut g = Graph::new();
    let p = model.bind_constants(&mut g);
    let v = objective_var(&mut g, &p, model, data, batch, objective)?;
    Ok(g.scalar(v))
}

/// Loss value and gradient for every parameter (zero where unused).
pub fn objective_grad(
    model: &Model,
    data: &TrainingData,
    batch: &Batch,
    objective: Objective,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut g = Graph::new();
    let p = model.bind(&mut g);
    let v = objective_var(&mut g, &p, model, data, batch, objective)?;
    let grads = g.backward(v);
    let out = p
        .iter()
        .map(|(name, &var)| {
            let t = grads
                .get(var)
                .cloned()
                .unwrap_or_else(|| Array2::zeros(g.value(var).raw_dim()));
            (name.clone(), t)
        })
        .collect();
    Ok((g.scalar(v), out))
}

// ---------------------------------------------------------------------------
// Optimizer and loop

/// Adam with bias correction and constant learning rate.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.lr,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &BTreeMap<String, Tensor>) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (name, g) in grads {
            let Some(param) = model.params.get_mut(name) else {
                continue;
            };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.raw_dim()));
            let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
            ndarray::Zip::from(param)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
        model.clamp_tau();
    }
}

/// Losses of one optimizer step; absent terms serialize as `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub iter: usize,
    pub task: Task,
    pub l_r: Option<f64>,
    pub l_p: Option<f64>,
    pub l_htn: Option<f64>,
    pub l_tok_t: Option<f64>,
    pub l_tok_v: Option<f64>,
    pub tau: f64,
}

impl StepMetrics {
    pub fn total(&self) -> f64 {
        [self.l_r, self.l_p, self.l_htn, self.l_tok_t, self.l_tok_v]
            .iter()
            .flatten()
            .sum()
    }
}

fn collect_grads(g: &Graph, p: &Bound, loss: Var) -> BTreeMap<String, Tensor> {
    let grads = g.backward(loss);
    p.iter()
        .filter_map(|(name, &var)| grads.get(var).map(|t| (name.clone(), t.clone())))
        .collect()
}

/// One optimizer step on `task`. Returns the step metrics.
fn train_step(
    model: &mut Model,
    opt: &mut Adam,
    data: &TrainingData,
    cfg: &TrainConfig,
    iter: usize,
    task: Task,
    batch_rng: &mut ChaCha8Rng,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<StepMetrics> {
    let dropout = model.config.fusion.dropout;
    let (metrics, grads) = {
        let mut g = Graph::new();
        let p = model.bind(&mut g);
        let mut mode = Mode::Train {
            rng: dropout_rng,
            dropout,
        };
        let value = |g: &Graph, v: Option<Var>| v.map(|v| g.scalar(v));
        match task {
            Task::Coarse => {
                let batch = sample_coarse(data, cfg.batch_size, cfg.use_htn, batch_rng);
                let v = coarse_losses(&mut g, &p, model, data, &batch, &mut mode)?;
                let mut terms = vec![v.l_r, v.l_p];
                terms.extend(v.l_htn);
                let total = g.add_scalars(&terms);
                let m = StepMetrics {
                    iter,
                    task,
                    l_r: Some(g.scalar(v.l_r)),
                    l_p: Some(g.scalar(v.l_p)),
                    l_htn: value(&g, v.l_htn),
                    l_tok_t: None,
                    l_tok_v: None,
                    tau: model.tau(),
                };
                check_finite(&g, total, iter)?;
                (m, collect_grads(&g, &p, total))
            }
            Task::Fine => {
                let batch = sample_fine(data, cfg.batch_size, batch_rng);
                let v = fine_losses(&mut g, &p, model, data, &batch, &mut mode)?;
                let terms: Vec<Var> = v.l_tok_t.into_iter().chain(v.l_tok_v).collect();
                let total = g.add_scalars(&terms);
                let m = StepMetrics {
                    iter,
                    task,
                    l_r: None,
                    l_p: None,
                    l_htn: None,
                    l_tok_t: value(&g, v.l_tok_t),
                    l_tok_v: value(&g, v.l_tok_v),
                    tau: model.tau(),
                };
                check_finite(&g, total, iter)?;
                (m, collect_grads(&g, &p, total))
            }
        }
    };
    if let Some((name, _)) = grads.iter().find(|(_, t)| t.iter().any(|v| !v.is_finite())) {
        return Err(Error::Diverged {
            iter,
            detail: format!("non-finite gradient for {name}"),
        });
    }
    opt.step(model, &grads);
    Ok(StepMetrics {
        tau: model.tau(),
        ..metrics
    })
}

fn check_finite(g: &Graph, loss: Var, iter: usize) -> Result<()> {
    let v = g.scalar(loss);
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            iter,
            detail: format!("loss is {v}"),
        })
    }
}

/// Runs `cfg.total_iters` steps. `on_step` sees every step after the
/// parameter update; returning an error stops training.
pub fn train(
    model: &mut Model,
    data: &TrainingData,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepMetrics, &Model) -> Result<()>,
) -> Result<Vec<StepMetrics>> {
    cfg.validate()?;
    if data.coarse.is_empty() {
        return Err(Error::InvalidArgument("no coarse training pairs".into()));
    }
    let has_fine = !data.fine_text.is_empty() || !data.fine_vision.is_empty();
    let mut batch_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &["batches"]));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &["dropout"]));
    let mut opt = Adam::new(cfg);
    let mut log = Vec::with_capacity(cfg.total_iters);
    for iter in 0..cfg.total_iters {
        let task = match cfg.task_at(iter) {
            Task::Fine if !has_fine => Task::Coarse,
            t => t,
        };
        let m = train_step(
            model,
            &mut opt,
            data,
            cfg,
            iter,
            task,
            &mut batch_rng,
            &mut dropout_rng,
        )?;
        on_step(&m, model)?;
        log.push(m);
    }
    Ok(log)
}

/// Averages `l_r + l_p` over consecutive windows of `window` coarse steps.
pub fn windowed_nce(log: &[StepMetrics], window: usize) -> Vec<f64> {
    let nce: Vec<f64> = log.iter().filter_map(|m| Some(m.l_r? + m.l_p?)).collect();
    nce.chunks(window.max(1))
        .filter(|c| c.len() == window.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}
