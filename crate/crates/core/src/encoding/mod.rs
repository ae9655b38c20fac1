//! Token-level encoding of images and captions.
//!
//! An image becomes one feature per detected region, a whole-image global
//! feature and an all-zero null token. A caption becomes a sentence-level
//! global feature plus one feature per token, where every token is encoded on
//! its own so that its feature carries no sentence context.

mod backbone;
mod regions;

use std::collections::BTreeSet;

use image::RgbImage;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

pub use backbone::{
    bin_centre, colour_bin, colour_histogram, image_key, is_neutral, text_key, EmbeddingBackbone,
    FeatureFile, FeatureFileBackbone, SyntheticBackbone, COLOUR_BINS, COLOUR_LEVELS,
};
pub use regions::{dedup_regions, BBox, Dedup, DedupConfig, RegionSet};

use crate::error::{Error, Result};

/// Longest caption the model accepts; longer captions are truncated.
pub const MAX_CAPTION_LEN: usize = 32;

/// Set of part-of-speech tags (Universal POS names) that count as semantic.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PosSet(pub BTreeSet<String>);

impl PosSet {
    pub fn from_tags<I, S>(tags: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self(tags.into_iter().map(Into::into).collect())
    }

    /// Content words used for training labels and hard negatives.
    pub fn training() -> Self {
        Self::from_tags(["NOUN", "PROPN", "VERB", "ADJ", "ADV"])
    }

    /// Content words scored by token-level accuracy.
    pub fn evaluation() -> Self {
        Self::from_tags(["NOUN", "PROPN", "VERB", "ADJ", "NUM"])
    }

    pub fn contains(&self, tag: &str) -> bool {
        self.0.contains(tag)
    }

    pub fn mask(&self, pos: &[String]) -> Vec<bool> {
        pos.iter().map(|p| self.contains(p)).collect()
    }

    pub fn count(&self, pos: &[String]) -> usize {
        pos.iter().filter(|p| self.contains(p)).count()
    }
}

impl Default for PosSet {
    fn default() -> Self {
        Self::training()
    }
}

/// A tokenized caption with one POS tag per token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedCaption {
    pub tokens: Vec<String>,
    pub pos: Vec<String>,
}

impl TaggedCaption {
    pub fn new(tokens: Vec<String>, pos: Vec<String>) -> Result<Self> {
        if tokens.len() != pos.len() {
            return Err(Error::InvalidArgument(format!(
                "{} tokens but {} POS tags",
                tokens.len(),
                pos.len()
            )));
        }
        Ok(Self { tokens, pos })
    }

    /// Builds from `word/TAG` pairs separated by whitespace.
    pub fn parse_slashed(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut pos = Vec::new();
        for item in text.split_whitespace() {
            let (w, t) = item
                .rsplit_once('/')
                .ok_or_else(|| Error::InvalidArgument(format!("'{item}' is not word/TAG")))?;
            tokens.push(w.to_string());
            pos.push(t.to_string());
        }
        Self::new(tokens, pos)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageTokenFeatures {
    /// `m x d`, one row per region.
    pub region_feats: Array2<f64>,
    pub global_feat: Array1<f64>,
    /// Always the zero vector.
    pub null_feat: Array1<f64>,
    /// `m x 4` boxes scaled into `[0, 1]`.
    pub norm_boxes: Array2<f64>,
}

impl ImageTokenFeatures {
    pub fn new(
        region_feats: Array2<f64>,
        global_feat: Array1<f64>,
        norm_boxes: Array2<f64>,
    ) -> Result<Self> {
        let d = global_feat.len();
        let m = region_feats.nrows();
        if m == 0 {
            return Err(Error::NoRegions);
        }
        if region_feats.ncols() != d {
            return Err(Error::DimensionMismatch(format!(
                "region features have dim {}, global has {d}",
                region_feats.ncols()
            )));
        }
        if norm_boxes.dim() != (m, 4) {
            return Err(Error::DimensionMismatch(format!(
                "expected {m} x 4 boxes, got {:?}",
                norm_boxes.dim()
            )));
        }
        if region_feats
            .iter()
            .chain(global_feat.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("image features".into()));
        }
        Ok(Self {
            region_feats,
            global_feat,
            null_feat: Array1::zeros(d),
            norm_boxes,
        })
    }

    pub fn num_regions(&self) -> usize {
        self.region_feats.nrows()
    }

    pub fn dim(&self) -> usize {
        self.global_feat.len()
    }

    /// Reorders regions (and their boxes): output region `i` is input region `perm[i]`.
    pub fn permute_regions(&self, perm: &[usize]) -> Self {
        let d = self.dim();
        let mut feats = Array2::zeros((perm.len(), d));
        let mut boxes = Array2::zeros((perm.len(), 4));
        for (i, &p) in perm.iter().enumerate() {
            feats.row_mut(i).assign(&self.region_feats.row(p));
            boxes.row_mut(i).assign(&self.norm_boxes.row(p));
        }
        Self {
            region_feats: feats,
            global_feat: self.global_feat.clone(),
            null_feat: self.null_feat.clone(),
            norm_boxes: boxes,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionTokenFeatures {
    /// `n x d`, each token encoded alone.
    pub token_feats: Array2<f64>,
    pub global_feat: Array1<f64>,
    pub tokens: Vec<String>,
    pub pos_tags: Vec<String>,
    pub semantic_mask: Vec<bool>,
    /// Set when the input was longer than [`MAX_CAPTION_LEN`].
    pub truncated: bool,
}

impl CaptionTokenFeatures {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.global_feat.len()
    }

    pub fn num_semantic(&self) -> usize {
        self.semantic_mask.iter().filter(|&&s| s).count()
    }
}

/// Crops `image` to a box, rounding coordinates to whole pixels.
pub fn crop(image: &RgbImage, b: &BBox, index: usize) -> Result<RgbImage> {
    let x0 = b[0].round().max(0.0) as u32;
    let y0 = b[1].round().max(0.0) as u32;
    let x1 = (b[2].round() as u32).min(image.width());
    let y1 = (b[3].round() as u32).min(image.height());
    if x1 <= x0 || y1 <= y0 {
        return Err(Error::DegenerateCrop { index });
    }
    Ok(image::imageops::crop_imm(image, x0, y0, x1 - x0, y1 - y0).to_image())
}

/// Encodes every region crop, the whole image and the null token.
pub fn extract_image_tokens(
    image: &RgbImage,
    regions: &RegionSet,
    backbone: &dyn EmbeddingBackbone,
) -> Result<ImageTokenFeatures> {
    if regions.is_empty() {
        return Err(Error::NoRegions);
    }
    regions.validate()?;
    if regions.image_size != image.dimensions() {
        return Err(Error::InvalidArgument(format!(
            "regions describe a {:?} image but the image is {:?}",
            regions.image_size,
            image.dimensions()
        )));
    }
    let d = backbone.dim();
    let m = regions.len();
    let mut feats = Array2::zeros((m, d));
    for (i, b) in regions.boxes.iter().enumerate() {
        let c = crop(image, b, i)?;
        feats.row_mut(i).assign(&backbone.embed_image(&c)?);
    }
    let global = backbone.embed_image(image)?;
    let boxes = regions.normalized_boxes();
    let norm_boxes = Array2::from_shape_fn((m, 4), |(i, j)| boxes[i][j]);
    ImageTokenFeatures::new(feats, global, norm_boxes)
}

/// Encodes the full sentence and every token independently.
pub fn extract_caption_tokens(
    caption: &TaggedCaption,
    backbone: &dyn EmbeddingBackbone,
    semantic: &PosSet,
) -> Result<CaptionTokenFeatures> {
    if caption.is_empty() {
        return Err(Error::EmptyCaption);
    }
    if caption.tokens.len() != caption.pos.len() {
        return Err(Error::InvalidArgument(
            "tokens and POS tags differ in length".into(),
        ));
    }
    let truncated = caption.len() > MAX_CAPTION_LEN;
    let n = caption.len().min(MAX_CAPTION_LEN);
    let tokens = caption.tokens[..n].to_vec();
    let pos_tags = caption.pos[..n].to_vec();

    let global_feat = backbone.embed_text(&tokens)?;
    let d = backbone.dim();
    let mut token_feats = Array2::zeros((n, d));
    for (i, t) in tokens.iter().enumerate() {
        let f = backbone.embed_text(std::slice::from_ref(t))?;
        token_feats.row_mut(i).assign(&f);
    }
    Ok(CaptionTokenFeatures {
        token_feats,
        global_feat,
        semantic_mask: semantic.mask(&pos_tags),
        tokens,
        pos_tags,
        truncated,
    })
}
