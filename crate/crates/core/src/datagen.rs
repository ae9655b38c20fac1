//! Training supervision: hard textual negatives, polluted captions and
//! grounded region labels.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{self, DatasetRecord, GroundingAnnotation};
use crate::encoding::{dedup_regions, DedupConfig, PosSet, TaggedCaption, MAX_CAPTION_LEN};
use crate::error::{Error, Result};

/// Stable 64-bit seed derived from a global seed and a path of labels.
pub fn derive_seed(seed: u64, parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

pub fn semantic_count(caption: &TaggedCaption, semantic: &PosSet) -> usize {
    semantic.count(&caption.pos)
}

/// Indices of the positive caption and its hard negatives within one image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HardNegatives {
    pub positive: usize,
    pub negatives: Vec<usize>,
}

/// Picks the caption with the strictly largest semantic-word count as the
/// positive. Returns `None` when the maximum is tied.
pub fn select_hard_negative(
    captions: &[TaggedCaption],
    semantic: &PosSet,
) -> Result<Option<HardNegatives>> {
    if captions.len() < 2 {
        return Err(Error::InsufficientCaptions);
    }
    let counts: Vec<usize> = captions
        .iter()
        .map(|c| semantic_count(c, semantic))
        .collect();
    let max = *counts.iter().max().expect("non-empty");
    let winners: Vec<usize> = (0..counts.len()).filter(|&i| counts[i] == max).collect();
    if winners.len() > 1 {
        return Ok(None);
    }
    let positive = winners[0];
    Ok(Some(HardNegatives {
        positive,
        negatives: (0..captions.len()).filter(|&i| i != positive).collect(),
    }))
}

/// Frequency-ranked replacement words per POS tag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PollutionVocab {
    pub top_k: usize,
    pub words: BTreeMap<String, Vec<(String, u64)>>,
}

impl PollutionVocab {
    pub const DEFAULT_TOP_K: usize = 100;

    /// Counts lowercased words per semantic tag and keeps the `top_k` most
    /// frequent, ties broken alphabetically.
    pub fn build<'a>(
        captions: impl IntoIterator<Item = &'a TaggedCaption>,
        semantic: &PosSet,
        top_k: usize,
    ) -> Self {
        let mut counts: BTreeMap<String, BTreeMap<String, u64>> = BTreeMap::new();
        for c in captions {
            for (tok, tag) in c.tokens.iter().zip(&c.pos) {
                if semantic.contains(tag) {
                    *counts
                        .entry(tag.clone())
                        .or_default()
                        .entry(tok.to_lowercase())
                        .or_default() += 1;
                }
            }
        }
        let words = counts
            .into_iter()
            .map(|(tag, ws)| {
                let mut ws: Vec<(String, u64)> = ws.into_iter().collect();
                ws.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
                ws.truncate(top_k);
                (tag, ws)
            })
            .collect();
        Self { top_k, words }
    }

    /// Every tag in `tags` has at least one entry.
    pub fn check(&self, tags: &PosSet) -> Result<()> {
        for t in &tags.0 {
            if self.words.get(t).is_none_or(|w| w.is_empty()) {
                return Err(Error::InvalidArgument(format!(
                    "pollution vocabulary has no {t} words"
                )));
            }
        }
        Ok(())
    }

    fn has_replacement(&self, tag: &str, original: &str) -> bool {
        let o = original.to_lowercase();
        self.words
            .get(tag)
            .is_some_and(|ws| ws.iter().any(|(w, _)| *w != o))
    }

    /// Frequency-weighted draw of a `tag` word different from `original`.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        tag: &str,
        original: &str,
        rng: &mut R,
    ) -> Option<String> {
        let o = original.to_lowercase();
        let cands: Vec<&(String, u64)> = self
            .words
            .get(tag)?
            .iter()
            .filter(|(w, _)| *w != o)
            .collect();
        if cands.is_empty() {
            return None;
        }
        let dist = WeightedIndex::new(cands.iter().map(|(_, c)| *c)).ok()?;
        Some(cands[dist.sample(rng)].0.clone())
    }
}

/// A caption with one semantic word replaced.
#[derive(Clone, Debug, PartialEq)]
pub struct PollutedCaption {
    pub caption: TaggedCaption,
    pub polluted_idx: usize,
    /// Per token: 1 correct, 0 polluted, -1 not semantic.
    pub labels: Vec<i8>,
}

/// Replaces one uniformly chosen semantic word (within the model's caption
/// window) by a different word of the same tag.
pub fn pollute_caption<R: Rng + ?Sized>(
    caption: &TaggedCaption,
    vocab: &PollutionVocab,
    semantic: &PosSet,
    rng: &mut R,
) -> Result<PollutedCaption> {
    let mask = semantic.mask(&caption.pos);
    if !mask.iter().any(|&s| s) {
        return Err(Error::NoSemanticWords);
    }
    let candidates: Vec<usize> = (0..caption.len().min(MAX_CAPTION_LEN))
        .filter(|&i| mask[i] && vocab.has_replacement(&caption.pos[i], &caption.tokens[i]))
        .collect();
    if candidates.is_empty() {
        return Err(Error::InvalidArgument(
            "vocabulary has no replacement for any semantic word".into(),
        ));
    }
    let idx = candidates[rng.random_range(0..candidates.len())];
    let word = vocab
        .sample(&caption.pos[idx], &caption.tokens[idx], rng)
        .expect("candidate has a replacement");
    let mut out = caption.clone();
    out.tokens[idx] = word;
    let labels = mask
        .iter()
        .enumerate()
        .map(|(i, &s)| match (s, i == idx) {
            (false, _) => -1,
            (true, true) => 0,
            (true, false) => 1,
        })
        .collect();
    Ok(PollutedCaption {
        caption: out,
        polluted_idx: idx,
        labels,
    })
}

/// Region labels from grounding annotations: `m` region entries plus a
/// trailing null entry that is always 0.
pub fn vision_labels(grounding: &[&GroundingAnnotation], m: usize) -> Result<Vec<u8>> {
    let mut y = vec![0u8; m + 1];
    for g in grounding {
        for &b in &g.box_indices {
            if b >= m {
                return Err(Error::InvalidArgument(format!(
                    "box index {b} out of range for {m} regions"
                )));
            }
            y[b] = 1;
        }
    }
    if !y.contains(&1) {
        return Err(Error::InvalidArgument("no grounded region".into()));
    }
    Ok(y)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoarsePair {
    pub image_id: String,
    pub caption_idx: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HtnTriplet {
    pub image_id: String,
    pub pos_idx: usize,
    pub neg_idx: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FineTextRecord {
    pub image_id: String,
    pub caption_idx: usize,
    /// Polluted tokens.
    pub tokens: Vec<String>,
    pub pos: Vec<String>,
    pub polluted_idx: usize,
    #[serde(rename = "Y_t")]
    pub y_t: Vec<i8>,
}

impl FineTextRecord {
    pub fn caption(&self) -> Result<TaggedCaption> {
        TaggedCaption::new(self.tokens.clone(), self.pos.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FineVisionRecord {
    pub image_id: String,
    pub caption_idx: usize,
    #[serde(rename = "Y_v")]
    pub y_v: Vec<u8>,
}

/// A record skipped during generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedRecord {
    pub image_id: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatagenConfig {
    pub seed: u64,
    pub top_k: usize,
    pub semantic: PosSet,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            top_k: PollutionVocab::DEFAULT_TOP_K,
            semantic: PosSet::training(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingSets {
    pub coarse: Vec<CoarsePair>,
    pub htn: Vec<HtnTriplet>,
    pub fine_text: Vec<FineTextRecord>,
    pub fine_vision: Vec<FineVisionRecord>,
    pub skipped: Vec<SkippedRecord>,
}

fn parse_captions(r: &DatasetRecord) -> Result<Vec<TaggedCaption>> {
    r.captions.iter().map(|c| c.tagged()).collect()
}

fn stable_shuffle<T, K: Ord>(items: &mut [T], key: impl Fn(&T) -> K, seed: u64, label: &str) {
    items.sort_by_key(|a| key(a));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["shuffle", label]));
    items.shuffle(&mut rng);
}

/// Builds the four training collections. Invalid records are logged in
/// `skipped`; output does not depend on input record order.
pub fn build_training_sets(
    records: &[DatasetRecord],
    cfg: &DatagenConfig,
) -> Result<(TrainingSets, PollutionVocab)> {
    let mut sets = TrainingSets::default();
    let mut valid: Vec<(&DatasetRecord, Vec<TaggedCaption>)> = Vec::new();
    let mut seen = BTreeSet::new();
    for r in records {
        let parsed = r.validate().and_then(|_| parse_captions(r));
        match parsed {
            Ok(_) if !seen.insert(r.image_id.clone()) => sets.skipped.push(SkippedRecord {
                image_id: r.image_id.clone(),
                reason: "duplicate image_id".into(),
            }),
            Ok(caps) => valid.push((r, caps)),
            Err(e) => sets.skipped.push(SkippedRecord {
                image_id: r.image_id.clone(),
                reason: e.to_string(),
            }),
        }
    }
    valid.sort_by(|a, b| a.0.image_id.cmp(&b.0.image_id));

    let vocab = PollutionVocab::build(
        valid.iter().flat_map(|(_, c)| c.iter()),
        &cfg.semantic,
        cfg.top_k,
    );

    for (r, caps) in &valid {
        let id = &r.image_id;
        for i in 0..caps.len() {
            sets.coarse.push(CoarsePair {
                image_id: id.clone(),
                caption_idx: i,
            });
        }
        if caps.len() >= 2 {
            if let Some(h) = select_hard_negative(caps, &cfg.semantic)? {
                for &n in &h.negatives {
                    sets.htn.push(HtnTriplet {
                        image_id: id.clone(),
                        pos_idx: h.positive,
                        neg_idx: n,
                    });
                }
            }
        }
        for (ci, cap) in caps.iter().enumerate() {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &["pollute", id, &ci.to_string()]));
            match pollute_caption(cap, &vocab, &cfg.semantic, &mut rng) {
                Ok(p) => sets.fine_text.push(FineTextRecord {
                    image_id: id.clone(),
                    caption_idx: ci,
                    tokens: p.caption.tokens,
                    pos: p.caption.pos,
                    polluted_idx: p.polluted_idx,
                    y_t: p.labels,
                }),
                Err(Error::NoSemanticWords) => {}
                Err(e) => sets.skipped.push(SkippedRecord {
                    image_id: id.clone(),
                    reason: format!("caption {ci}: {e}"),
                }),
            }
            let anns: Vec<&GroundingAnnotation> =
                r.grounding.iter().filter(|g| g.caption_idx == ci).collect();
            if anns.iter().any(|g| !g.box_indices.is_empty()) {
                sets.fine_vision.push(FineVisionRecord {
                    image_id: id.clone(),
                    caption_idx: ci,
                    y_v: vision_labels(&anns, r.boxes.len())?,
                });
            }
        }
    }

    let seed = cfg.seed;
    stable_shuffle(
        &mut sets.coarse,
        |p| (p.image_id.clone(), p.caption_idx),
        seed,
        "coarse",
    );
    stable_shuffle(
        &mut sets.htn,
        |t| (t.image_id.clone(), t.pos_idx, t.neg_idx),
        seed,
        "htn",
    );
    stable_shuffle(
        &mut sets.fine_text,
        |f| (f.image_id.clone(), f.caption_idx),
        seed,
        "fine_text",
    );
    stable_shuffle(
        &mut sets.fine_vision,
        |f| (f.image_id.clone(), f.caption_idx),
        seed,
        "fine_vision",
    );
    sets.skipped.sort_by(|a, b| {
        a.image_id
            .cmp(&b.image_id)
            .then_with(|| a.reason.cmp(&b.reason))
    });
    Ok((sets, vocab))
}

/// Clusters each record's boxes and remaps grounding to the kept boxes.
pub fn dedup_record(
    r: &DatasetRecord,
    image_size: (u32, u32),
    cfg: &DedupConfig,
) -> Result<DatasetRecord> {
    let d = dedup_regions(&r.regions(image_size)?, cfg)?;
    let mut out = r.clone();
    out.boxes = d.regions.boxes.clone();
    out.confidences = d.regions.confidences.clone();
    for g in &mut out.grounding {
        let set: BTreeSet<usize> = g.box_indices.iter().map(|&b| d.assignment[b]).collect();
        g.box_indices = set.into_iter().collect();
    }
    Ok(out)
}

pub const COARSE_FILE: &str = "coarse.jsonl";
pub const HTN_FILE: &str = "htn.jsonl";
pub const FINE_TEXT_FILE: &str = "fine_text.jsonl";
pub const FINE_VISION_FILE: &str = "fine_vision.jsonl";

impl TrainingSets {
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        dataset::write_jsonl(&dir.join(COARSE_FILE), &self.coarse)?;
        dataset::write_jsonl(&dir.join(HTN_FILE), &self.htn)?;
        dataset::write_jsonl(&dir.join(FINE_TEXT_FILE), &self.fine_text)?;
        dataset::write_jsonl(&dir.join(FINE_VISION_FILE), &self.fine_vision)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        Ok(Self {
            coarse: dataset::read_jsonl(&dir.join(COARSE_FILE))?,
            htn: dataset::read_jsonl(&dir.join(HTN_FILE))?,
            fine_text: dataset::read_jsonl(&dir.join(FINE_TEXT_FILE))?,
            fine_vision: dataset::read_jsonl(&dir.join(FINE_VISION_FILE))?,
            skipped: Vec::new(),
        })
    }
}

/// Outcome of [`validate_training_sets`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub htn_total: usize,
    pub htn_ordered: usize,
    pub fine_text_total: usize,
    pub fine_text_valid: usize,
    pub fine_vision_total: usize,
    pub fine_vision_valid: usize,
    pub round_trip: bool,
    pub problems: Vec<String>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.problems.is_empty()
            && self.round_trip
            && self.htn_ordered == self.htn_total
            && self.fine_text_valid == self.fine_text_total
            && self.fine_vision_valid == self.fine_vision_total
    }
}

fn round_trips<T: Serialize + serde::de::DeserializeOwned>(items: &[T]) -> Result<bool> {
    let text = dataset::to_jsonl(items)?;
    let parsed: Vec<T> = text
        .lines()
        .map(serde_json::from_str)
        .collect::<std::result::Result<_, _>>()?;
    Ok(dataset::to_jsonl(&parsed)? == text)
}

/// Checks every generated record against the source corpus.
pub fn validate_training_sets(
    records: &[DatasetRecord],
    sets: &TrainingSets,
    semantic: &PosSet,
) -> Result<ValidationReport> {
    let by_id: BTreeMap<&str, &DatasetRecord> =
        records.iter().map(|r| (r.image_id.as_str(), r)).collect();
    let mut rep = ValidationReport {
        htn_total: sets.htn.len(),
        fine_text_total: sets.fine_text.len(),
        fine_vision_total: sets.fine_vision.len(),
        ..Default::default()
    };
    let caption = |id: &str, idx: usize| -> Option<TaggedCaption> {
        by_id
            .get(id)
            .and_then(|r| r.captions.get(idx))
            .and_then(|c| c.tagged().ok())
    };

    for t in &sets.htn {
        match (
            caption(&t.image_id, t.pos_idx),
            caption(&t.image_id, t.neg_idx),
        ) {
            (Some(p), Some(n)) if semantic_count(&p, semantic) > semantic_count(&n, semantic) => {
                rep.htn_ordered += 1
            }
            _ => rep
                .problems
                .push(format!("htn {} {}>{}", t.image_id, t.pos_idx, t.neg_idx)),
        }
    }

    for f in &sets.fine_text {
        let ok = caption(&f.image_id, f.caption_idx).is_some_and(|orig| {
            let mask = semantic.mask(&orig.pos);
            let zeros: Vec<usize> = (0..f.y_t.len()).filter(|&i| f.y_t[i] == 0).collect();
            orig.len() == f.tokens.len()
                && orig.pos == f.pos
                && f.y_t.len() == orig.len()
                && zeros == [f.polluted_idx]
                && mask[f.polluted_idx]
                && orig.tokens[f.polluted_idx].to_lowercase()
                    != f.tokens[f.polluted_idx].to_lowercase()
                && (0..orig.len()).all(|i| {
                    let expect = if !mask[i] {
                        -1
                    } else if i == f.polluted_idx {
                        0
                    } else {
                        1
                    };
                    f.y_t[i] == expect && (i == f.polluted_idx || orig.tokens[i] == f.tokens[i])
                })
        });
        if ok {
            rep.fine_text_valid += 1;
        } else {
            rep.problems
                .push(format!("fine_text {} {}", f.image_id, f.caption_idx));
        }
    }

    for f in &sets.fine_vision {
        let ok = by_id.get(f.image_id.as_str()).is_some_and(|r| {
            f.y_v.len() == r.boxes.len() + 1
                && f.y_v.last() == Some(&0)
                && f.y_v.iter().all(|&y| y <= 1)
                && f.y_v.contains(&1)
        });
        if ok {
            rep.fine_vision_valid += 1;
        } else {
            rep.problems
                .push(format!("fine_vision {} {}", f.image_id, f.caption_idx));
        }
    }

    rep.round_trip = round_trips(&sets.coarse)?
        && round_trips(&sets.htn)?
        && round_trips(&sets.fine_text)?
        && round_trips(&sets.fine_vision)?;
    Ok(rep)
}
