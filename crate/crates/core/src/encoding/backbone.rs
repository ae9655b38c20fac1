//! Frozen embedding backbones.

use std::collections::BTreeMap;
use std::path::Path;

use image::RgbImage;
use ndarray::{Array1, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// A frozen vision-language encoder.
///
/// Implementations must be read-only after construction: identical inputs give
/// bit-identical outputs and all vectors have dimension [`dim`](Self::dim).
pub trait EmbeddingBackbone: Send + Sync {
    fn dim(&self) -> usize;

    /// Unit-norm embedding of an RGB image (or crop).
    fn embed_image(&self, image: &RgbImage) -> Result<Array1<f64>>;

    /// Unit-norm embedding of a token sequence. A one-token slice encodes the
    /// token with no surrounding context.
    fn embed_text(&self, tokens: &[String]) -> Result<Array1<f64>>;

    /// The backbone's own contrastive temperature, if it has one.
    fn logit_temperature(&self) -> Option<f64>;

    /// Digest of the backbone's state, used to verify it is never modified.
    fn fingerprint(&self) -> String;
}

pub(crate) fn l2_normalize(mut v: Array1<f64>) -> Result<Array1<f64>> {
    let n = v.dot(&v).sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::ZeroVector);
    }
    v /= n;
    Ok(v)
}

/// Quantization levels per RGB channel used by [`SyntheticBackbone`].
pub const COLOUR_LEVELS: usize = 8;
/// Number of quantized colours.
pub const COLOUR_BINS: usize = COLOUR_LEVELS * COLOUR_LEVELS * COLOUR_LEVELS;
/// Weight of the constant direction mixed into every image embedding, so
/// that content-free crops still embed.
const IMAGE_BIAS: f64 = 0.01;

/// Quantized colour index of an RGB pixel.
pub fn colour_bin(px: [u8; 3]) -> usize {
    let q = |v: u8| v as usize * COLOUR_LEVELS / 256;
    (q(px[0]) * COLOUR_LEVELS + q(px[1])) * COLOUR_LEVELS + q(px[2])
}

/// Channel values in `[0, 1]` at the centre of a colour bin.
pub fn bin_centre(bin: usize) -> [f64; 3] {
    let l = COLOUR_LEVELS;
    let c = |q: usize| ((q * 256 / l) as f64 + 128.0 / l as f64) / 255.0;
    [c(bin / (l * l)), c(bin / l % l), c(bin % l)]
}

/// Near-grey colours (every channel in the two middle levels) carry no
/// content and embed as zero.
pub fn is_neutral(bin: usize) -> bool {
    let l = COLOUR_LEVELS;
    let mid = |q: usize| q == l / 2 - 1 || q == l / 2;
    mid(bin / (l * l)) && mid(bin / l % l) && mid(bin % l)
}

/// Fraction of pixels in each colour bin.
pub fn colour_histogram(image: &RgbImage) -> Array1<f64> {
    let mut h = Array1::zeros(COLOUR_BINS);
    for p in image.pixels() {
        h[colour_bin(p.0)] += 1.0;
    }
    let n = (image.width() as f64) * (image.height() as f64);
    h / n
}

fn seed_from(parts: &[&[u8]]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update((p.len() as u64).to_le_bytes());
        hasher.update(p);
    }
    hasher.finalize().into()
}

/// Deterministic stand-in for a pretrained contrastive encoder.
///
/// Each token string is hashed (with the backbone seed) into a Gaussian
/// direction; a sentence embeds as the normalized sum of its token directions.
/// Each quantized colour likewise has a fixed random code, and an image embeds
/// as the normalized mean code over its pixels. Both encoders are additive, so
/// an image embeds near the sum of what it contains and a caption near the
/// sum of its words.
#[derive(Clone, Debug)]
pub struct SyntheticBackbone {
    dim: usize,
    seed: u64,
    colour_codes: Array2<f64>,
    bias: Array1<f64>,
    temperature: Option<f64>,
}

impl SyntheticBackbone {
    pub const DEFAULT_TEMPERATURE: f64 = 0.01;

    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::from_seed(seed_from(&[b"colour-codes", &seed.to_le_bytes()]));
        let scale = 1.0 / (dim as f64).sqrt();
        let mut colour_codes = Array2::zeros((COLOUR_BINS, dim));
        for (bin, mut row) in colour_codes.rows_mut().into_iter().enumerate() {
            for v in row.iter_mut() {
                let x: f64 = StandardNormal.sample(&mut rng);
                if !is_neutral(bin) {
                    *v = x * scale;
                }
            }
        }
        let bias: Array1<f64> = Array1::from_shape_fn(dim, |_| StandardNormal.sample(&mut rng));
        let bias = &bias / bias.dot(&bias).sqrt();
        Self {
            dim,
            seed,
            colour_codes,
            bias,
            temperature: Some(Self::DEFAULT_TEMPERATURE),
        }
    }

    pub fn with_temperature(mut self, temperature: Option<f64>) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `COLOUR_BINS x dim` code table; neutral rows are zero.
    pub fn colour_codes(&self) -> ArrayView2<'_, f64> {
        self.colour_codes.view()
    }

    fn token_direction(&self, token: &str) -> Array1<f64> {
        let mut rng = ChaCha8Rng::from_seed(seed_from(&[
            b"token",
            &self.seed.to_le_bytes(),
            token.as_bytes(),
        ]));
        Array1::from_shape_fn(self.dim, |_| StandardNormal.sample(&mut rng))
    }
}

impl EmbeddingBackbone for SyntheticBackbone {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_image(&self, image: &RgbImage) -> Result<Array1<f64>> {
        if image.width() == 0 || image.height() == 0 {
            return Err(Error::InvalidArgument("empty image".into()));
        }
        let mean = colour_histogram(image).dot(&self.colour_codes);
        l2_normalize(mean + &self.bias * IMAGE_BIAS)
    }

    fn embed_text(&self, tokens: &[String]) -> Result<Array1<f64>> {
        if tokens.is_empty() {
            return Err(Error::EmptyCaption);
        }
        let mut acc = Array1::zeros(self.dim);
        for t in tokens {
            let mut dir = self.token_direction(t);
            dir /= dir.dot(&dir).sqrt();
            acc += &dir;
        }
        l2_normalize(acc)
    }

    fn logit_temperature(&self) -> Option<f64> {
        self.temperature
    }

    fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.dim.to_le_bytes());
        hasher.update(self.seed.to_le_bytes());
        for v in self.colour_codes.iter().chain(&self.bias) {
            hasher.update(v.to_le_bytes());
        }
        if let Some(t) = self.temperature {
            hasher.update(t.to_le_bytes());
        }
        hex(&hasher.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Key under which an image crop is stored in a [`FeatureFileBackbone`]:
/// SHA-256 over width and height (u32 little endian) followed by the raw
/// RGB bytes.
pub fn image_key(image: &RgbImage) -> String {
    let mut hasher = Sha256::new();
    hasher.update(image.width().to_le_bytes());
    hasher.update(image.height().to_le_bytes());
    hasher.update(image.as_raw());
    hex(&hasher.finalize())
}

/// Key for a token sequence: tokens joined by U+001F.
pub fn text_key(tokens: &[String]) -> String {
    tokens.join("\u{1f}")
}

/// On-disk layout read by [`FeatureFileBackbone`].
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct FeatureFile {
    pub dim: usize,
    #[serde(default)]
    pub logit_temperature: Option<f64>,
    #[serde(default)]
    pub images: BTreeMap<String, Vec<f64>>,
    #[serde(default)]
    pub texts: BTreeMap<String, Vec<f64>>,
}

/// Adapter for a real pretrained encoder whose embeddings were exported
/// ahead of time (for example by a Python script running the actual model).
///
/// Lookups use [`image_key`] and [`text_key`]; a missing key is an error
/// rather than a silent fallback. Each single token must be exported as its
/// own one-token sequence, encoded with the exporter's own start/end marker
/// convention.
#[derive(Clone, Debug)]
pub struct FeatureFileBackbone {
    file: FeatureFile,
}

impl FeatureFileBackbone {
    pub fn new(file: FeatureFile) -> Result<Self> {
        for (k, v) in file.images.iter().chain(file.texts.iter()) {
            if v.len() != file.dim {
                return Err(Error::DimensionMismatch(format!(
                    "feature '{k}' has {} entries, expected {}",
                    v.len(),
                    file.dim
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("feature '{k}'")));
            }
        }
        Ok(Self { file })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(serde_json::from_str(&text)?)
    }

    fn lookup(map: &BTreeMap<String, Vec<f64>>, key: &str, what: &str) -> Result<Array1<f64>> {
        let v = map.get(key).ok_or_else(|| {
            Error::InvalidArgument(format!("no exported {what} feature for key {key:?}"))
        })?;
        l2_normalize(Array1::from_vec(v.clone()))
    }
}

impl EmbeddingBackbone for FeatureFileBackbone {
    fn dim(&self) -> usize {
        self.file.dim
    }

    fn embed_image(&self, image: &RgbImage) -> Result<Array1<f64>> {
        Self::lookup(&self.file.images, &image_key(image), "image")
    }

    fn embed_text(&self, tokens: &[String]) -> Result<Array1<f64>> {
        if tokens.is_empty() {
            return Err(Error::EmptyCaption);
        }
        Self::lookup(&self.file.texts, &text_key(tokens), "text")
    }

    fn logit_temperature(&self) -> Option<f64> {
        self.file.logit_temperature
    }

    fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(&self.file).unwrap_or_default();
        hex(&Sha256::digest(&bytes))
    }
}
