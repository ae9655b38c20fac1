//! A small synthetic captioning world for desk-scale training and demos.
//!
//! Each noun has a fixed 4x4 colour pattern. An image shows a few of these
//! objects on a noisy grey background plus one unmentioned background box.
//! Caption 0 names every object; the other captions name strict subsets.
//!
//! Patterns are rendered so that the synthetic backbone embeds a crop of a
//! noun's object close to the text embedding of the noun, the way a
//! contrastively pretrained encoder would. `alignment` sets how close.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::derive_seed;
use crate::dataset::{self, CaptionRecord, DatasetRecord, GroundingAnnotation};
use crate::encoding::{
    bin_centre, is_neutral, EmbeddingBackbone, SyntheticBackbone, TaggedCaption, COLOUR_BINS,
};
use crate::error::{Error, Result};

pub const NOUNS: [&str; 16] = [
    "cat", "dog", "bird", "ball", "car", "tree", "cup", "hat", "kite", "boat", "fish", "lamp",
    "book", "shoe", "key", "bell",
];

const LINKS: [&str; 3] = ["near", "beside", "with"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_images: usize,
    /// Objects are drawn from the first `num_nouns` entries of [`NOUNS`].
    pub num_nouns: usize,
    pub image_size: u32,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_captions: usize,
    pub max_captions: usize,
    pub min_side: u32,
    pub max_side: u32,
    /// Layout, caption and noise randomness.
    pub seed: u64,
    /// Object appearance; keep it fixed across train and held-out splits.
    pub appearance_seed: u64,
    /// Target cosine between a noun's pattern embedding and its word
    /// embedding, in `[0, 1]`.
    pub alignment: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_images: 200,
            num_nouns: 12,
            image_size: 96,
            min_objects: 2,
            max_objects: 4,
            min_captions: 3,
            max_captions: 5,
            min_side: 20,
            max_side: 32,
            seed: 0,
            appearance_seed: 7,
            alignment: 0.8,
        }
    }
}

/// Colour pattern of noun `n`, 4x4 cells of RGB in `[0, 1]`.
///
/// Cells are drawn from the backbone's colour palette, chosen greedily so the
/// summed colour codes point along a blend of the noun's word embedding and a
/// random direction.
pub fn appearance(
    backbone: &SyntheticBackbone,
    cfg: &SynthConfig,
    noun: usize,
) -> Result<[[f64; 3]; 16]> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        cfg.appearance_seed,
        &["appearance", NOUNS[noun]],
    ));
    let d = backbone.dim();
    let word = backbone.embed_text(&[NOUNS[noun].to_string()])?;
    let mut noise = Array1::from_shape_fn(d, |_| rng.random::<f64>() - 0.5);
    noise -= &(&word * word.dot(&noise));
    let noise = &noise / noise.dot(&noise).sqrt();
    let a = cfg.alignment.clamp(0.0, 1.0);
    let target = &word * a + &noise * (1.0 - a * a).sqrt();

    let codes = backbone.colour_codes();
    let palette: Vec<usize> = (0..COLOUR_BINS).filter(|&b| !is_neutral(b)).collect();
    let best = |sum: &Array1<f64>| {
        *palette
            .iter()
            .max_by(|&&x, &&y| {
                let c = |b: usize| {
                    let v = sum + &codes.row(b);
                    v.dot(&target) / v.dot(&v).sqrt().max(1e-12)
                };
                c(x).total_cmp(&c(y))
            })
            .expect("palette is non-empty")
    };
    let mut cells = Vec::with_capacity(16);
    let mut sum = Array1::zeros(d);
    for _ in 0..16 {
        let b = best(&sum);
        sum += &codes.row(b);
        cells.push(b);
    }
    for _ in 0..3 {
        for j in 0..16 {
            sum -= &codes.row(cells[j]);
            cells[j] = best(&sum);
            sum += &codes.row(cells[j]);
        }
    }
    cells.shuffle(&mut rng);
    let mut out = [[0.0; 3]; 16];
    for (o, &b) in out.iter_mut().zip(&cells) {
        *o = bin_centre(b);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct SynthSample {
    pub record: DatasetRecord,
    pub image: RgbImage,
    /// Noun index shown in each box; `None` for background boxes.
    pub box_nouns: Vec<Option<usize>>,
}

impl SynthSample {
    pub fn captions(&self) -> Result<Vec<TaggedCaption>> {
        self.record.captions.iter().map(|c| c.tagged()).collect()
    }

    /// Nouns of the world's vocabulary that do not appear in the image.
    pub fn absent_nouns(&self, num_nouns: usize) -> Vec<usize> {
        (0..num_nouns)
            .filter(|n| !self.box_nouns.contains(&Some(*n)))
            .collect()
    }
}

fn overlaps(a: &[u32; 4], b: &[u32; 4]) -> bool {
    a[0] < b[2] && b[0] < a[2] && a[1] < b[3] && b[1] < a[3]
}

fn place(rng: &mut ChaCha8Rng, cfg: &SynthConfig, taken: &[[u32; 4]]) -> Option<[u32; 4]> {
    for _ in 0..200 {
        let w = rng.random_range(cfg.min_side..=cfg.max_side);
        let h = rng.random_range(cfg.min_side..=cfg.max_side);
        let x = rng.random_range(0..=cfg.image_size - w);
        let y = rng.random_range(0..=cfg.image_size - h);
        let b = [x, y, x + w, y + h];
        if taken.iter().all(|t| !overlaps(t, &b)) {
            return Some(b);
        }
    }
    None
}

/// Builds a caption naming `nouns` in order, with token spans of each noun.
pub fn caption_for(nouns: &[usize], rng: &mut impl Rng) -> (TaggedCaption, Vec<usize>) {
    let mut tokens = Vec::new();
    let mut pos = Vec::new();
    let mut spans = Vec::new();
    for (i, &n) in nouns.iter().enumerate() {
        if i == 1 {
            tokens.push(LINKS[rng.random_range(0..LINKS.len())].to_string());
            pos.push("ADP".to_string());
        } else if i > 1 {
            tokens.push("and".to_string());
            pos.push("CCONJ".to_string());
        }
        tokens.push("a".to_string());
        pos.push("DET".to_string());
        spans.push(tokens.len());
        tokens.push(NOUNS[n].to_string());
        pos.push("NOUN".to_string());
    }
    (TaggedCaption { tokens, pos }, spans)
}

fn sample(cfg: &SynthConfig, patterns: &[[[f64; 3]; 16]], index: usize) -> Result<SynthSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &["synth", &index.to_string()]));
    let size = cfg.image_size;
    let mut image = RgbImage::from_fn(size, size, |_, _| {
        let v = (0.5 + rng.random_range(-0.05..0.05)) * 255.0;
        Rgb([v as u8; 3])
    });

    let k = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut nouns: Vec<usize> = (0..cfg.num_nouns).collect();
    nouns.shuffle(&mut rng);
    nouns.truncate(k);

    let mut placed: Vec<[u32; 4]> = Vec::new();
    let mut objects: Vec<(usize, [u32; 4])> = Vec::new();
    for &n in &nouns {
        let b = place(&mut rng, cfg, &placed)
            .ok_or_else(|| Error::InvalidArgument("image too small for objects".into()))?;
        placed.push(b);
        objects.push((n, b));
        let cells = patterns[n];
        let (w, h) = (b[2] - b[0], b[3] - b[1]);
        for y in b[1]..b[3] {
            for x in b[0]..b[2] {
                let cx = (4 * (x - b[0]) / w) as usize;
                let cy = (4 * (y - b[1]) / h) as usize;
                let c = cells[cy * 4 + cx];
                let px =
                    c.map(|v| ((v + rng.random_range(-0.03..0.03)).clamp(0.0, 1.0) * 255.0) as u8);
                image.put_pixel(x, y, Rgb(px));
            }
        }
    }

    // (box, confidence, noun)
    let mut boxes: Vec<([u32; 4], f64, Option<usize>)> = objects
        .iter()
        .map(|&(n, b)| (b, rng.random_range(0.6..1.0), Some(n)))
        .collect();
    if let Some(b) = place(&mut rng, cfg, &placed) {
        boxes.push((b, rng.random_range(0.3..0.55), None));
    }
    boxes.sort_by(|a, b| b.1.total_cmp(&a.1));
    let box_of = |n: usize| {
        boxes
            .iter()
            .position(|b| b.2 == Some(n))
            .expect("object has a box")
    };

    let n_caps = rng.random_range(cfg.min_captions..=cfg.max_captions);
    let mut captions = Vec::new();
    let mut grounding = Vec::new();
    for ci in 0..n_caps {
        let mut mention = nouns.clone();
        mention.shuffle(&mut rng);
        if ci > 0 {
            let keep = rng.random_range(1..k);
            mention.truncate(keep);
        }
        let (cap, spans) = caption_for(&mention, &mut rng);
        for (&n, &s) in mention.iter().zip(&spans) {
            grounding.push(GroundingAnnotation {
                caption_idx: ci,
                token_span: [s, s + 1],
                box_indices: vec![box_of(n)],
            });
        }
        captions.push(CaptionRecord::from_tagged(&cap));
    }

    let image_id = format!("synth{}_{index:05}", cfg.seed);
    let record = DatasetRecord {
        image_path: format!("{image_id}.png"),
        image_id,
        boxes: boxes.iter().map(|(b, _, _)| b.map(f64::from)).collect(),
        confidences: boxes
            .iter()
            .map(|b| (b.1 * 1000.0).round() / 1000.0)
            .collect(),
        captions,
        grounding,
    };
    Ok(SynthSample {
        record,
        image,
        box_nouns: boxes.iter().map(|b| b.2).collect(),
    })
}

pub fn generate(cfg: &SynthConfig, backbone: &SyntheticBackbone) -> Result<Vec<SynthSample>> {
    if cfg.num_nouns > NOUNS.len() {
        return Err(Error::InvalidArgument(format!(
            "at most {} nouns",
            NOUNS.len()
        )));
    }
    if cfg.min_objects < 2 || cfg.min_objects > cfg.max_objects || cfg.max_objects >= cfg.num_nouns
    {
        return Err(Error::InvalidArgument(
            "object counts must satisfy 2 <= min <= max < num_nouns".into(),
        ));
    }
    if cfg.min_captions < 2 || cfg.min_captions > cfg.max_captions {
        return Err(Error::InvalidArgument(
            "caption counts must satisfy 2 <= min <= max".into(),
        ));
    }
    if cfg.min_side == 0 || cfg.min_side > cfg.max_side || cfg.max_side > cfg.image_size {
        return Err(Error::InvalidArgument(
            "object sides must fit the image".into(),
        ));
    }
    let patterns = (0..cfg.num_nouns)
        .map(|n| appearance(backbone, cfg, n))
        .collect::<Result<Vec<_>>>()?;
    (0..cfg.num_images)
        .map(|i| sample(cfg, &patterns, i))
        .collect()
}

/// Writes PNG images and `dataset.jsonl` into `dir`.
pub fn write_corpus(samples: &[SynthSample], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in samples {
        s.image.save(dir.join(&s.record.image_path))?;
    }
    let records: Vec<&DatasetRecord> = samples.iter().map(|s| &s.record).collect();
    dataset::write_jsonl(&dir.join("dataset.jsonl"), &records)
}
