//! JSONL dataset records and helpers.
//!
//! One record per image:
//!
//! ```json
//! {"image_id": "...", "image_path": "...", "boxes": [[x1,y1,x2,y2], ...],
//!  "confidences": [...],
//!  "captions": [{"text": "...", "tokens": [...], "pos": [...]}],
//!  "grounding": [{"caption_idx": 0, "token_span": [1, 2], "box_indices": [0]}]}
//! ```

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::encoding::{RegionSet, TaggedCaption};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub text: String,
    pub tokens: Vec<String>,
    pub pos: Vec<String>,
}

impl CaptionRecord {
    pub fn tagged(&self) -> Result<TaggedCaption> {
        TaggedCaption::new(self.tokens.clone(), self.pos.clone())
    }

    pub fn from_tagged(c: &TaggedCaption) -> Self {
        Self {
            text: c.text(),
            tokens: c.tokens.clone(),
            pos: c.pos.clone(),
        }
    }
}

/// Links a caption phrase to the region boxes it describes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingAnnotation {
    pub caption_idx: usize,
    /// Half-open token range `[start, end)`.
    pub token_span: [usize; 2],
    pub box_indices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub image_id: String,
    pub image_path: String,
    pub boxes: Vec<[f64; 4]>,
    pub confidences: Vec<f64>,
    pub captions: Vec<CaptionRecord>,
    #[serde(default)]
    pub grounding: Vec<GroundingAnnotation>,
}

impl DatasetRecord {
    /// Structural checks that do not need the image file.
    pub fn validate(&self) -> Result<()> {
        if self.boxes.is_empty() {
            return Err(Error::Schema(format!("{}: no boxes", self.image_id)));
        }
        if self.boxes.len() != self.confidences.len() {
            return Err(Error::Schema(format!(
                "{}: {} boxes but {} confidences",
                self.image_id,
                self.boxes.len(),
                self.confidences.len()
            )));
        }
        for (i, c) in self.captions.iter().enumerate() {
            if c.tokens.is_empty() {
                return Err(Error::Schema(format!(
                    "{}: caption {i} is empty",
                    self.image_id
                )));
            }
            if c.tokens.len() != c.pos.len() {
                return Err(Error::Schema(format!(
                    "{}: caption {i} has {} tokens but {} POS tags",
                    self.image_id,
                    c.tokens.len(),
                    c.pos.len()
                )));
            }
        }
        for g in &self.grounding {
            let cap = self.captions.get(g.caption_idx).ok_or_else(|| {
                Error::Schema(format!(
                    "{}: grounding refers to caption {}",
                    self.image_id, g.caption_idx
                ))
            })?;
            let [s, e] = g.token_span;
            if s >= e || e > cap.tokens.len() {
                return Err(Error::Schema(format!(
                    "{}: token span {:?} outside caption {}",
                    self.image_id, g.token_span, g.caption_idx
                )));
            }
            if let Some(b) = g.box_indices.iter().find(|&&b| b >= self.boxes.len()) {
                return Err(Error::Schema(format!(
                    "{}: grounding box index {b} out of range",
                    self.image_id
                )));
            }
        }
        Ok(())
    }

    pub fn regions(&self, image_size: (u32, u32)) -> Result<RegionSet> {
        RegionSet::new(self.boxes.clone(), self.confidences.clone(), image_size)
    }

    /// Resolves `image_path` relative to `base` and reads it as RGB.
    pub fn load_image(&self, base: &Path) -> Result<RgbImage> {
        let path = resolve(base, &self.image_path);
        Ok(image::open(&path)?.to_rgb8())
    }
}

pub fn resolve(base: &Path, p: &str) -> PathBuf {
    let path = Path::new(p);
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

/// A line that failed to parse.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RecordError {
    pub line: usize,
    pub message: String,
}

/// Reads JSONL, collecting per-line errors instead of failing.
pub fn read_jsonl_lenient<T: DeserializeOwned>(path: &Path) -> Result<(Vec<T>, Vec<RecordError>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut ok = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(v) => ok.push(v),
            Err(e) => errors.push(RecordError {
                line: i + 1,
                message: e.to_string(),
            }),
        }
    }
    Ok((ok, errors))
}

/// Reads JSONL, failing on the first bad line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let (ok, errors) = read_jsonl_lenient(path)?;
    if let Some(e) = errors.first() {
        return Err(Error::Schema(format!(
            "{}:{}: {}",
            path.display(),
            e.line,
            e.message
        )));
    }
    Ok(ok)
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(to_jsonl(items)?.as_bytes())
        .map_err(|e| Error::io(path, e))
}
