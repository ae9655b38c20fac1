//! Detected region boxes and K-means de-duplication.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box `(x1, y1, x2, y2)` in absolute pixels.
pub type BBox = [f64; 4];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionSet {
    pub boxes: Vec<BBox>,
    pub confidences: Vec<f64>,
    /// `(width, height)` of the source image.
    pub image_size: (u32, u32),
}

impl RegionSet {
    pub fn new(boxes: Vec<BBox>, confidences: Vec<f64>, image_size: (u32, u32)) -> Result<Self> {
        let set = Self {
            boxes,
            confidences,
            image_size,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.boxes.len() != self.confidences.len() {
            return Err(Error::InvalidArgument(format!(
                "{} boxes but {} confidences",
                self.boxes.len(),
                self.confidences.len()
            )));
        }
        let (w, h) = (self.image_size.0 as f64, self.image_size.1 as f64);
        for (index, (b, c)) in self.boxes.iter().zip(&self.confidences).enumerate() {
            let bad = |reason: &str| Error::InvalidRegion {
                index,
                reason: reason.to_string(),
            };
            if b.iter().any(|v| !v.is_finite()) {
                return Err(bad("non-finite coordinate"));
            }
            if !(b[0] < b[2] && b[1] < b[3]) {
                return Err(bad("expected x1 < x2 and y1 < y2"));
            }
            if b[0] < 0.0 || b[1] < 0.0 || b[2] > w || b[3] > h {
                return Err(bad("box outside image bounds"));
            }
            if !(0.0..=1.0).contains(c) {
                return Err(bad("confidence outside [0, 1]"));
            }
        }
        Ok(())
    }

    /// Boxes scaled by the image size into `[0, 1]^4`.
    pub fn normalized_boxes(&self) -> Vec<BBox> {
        let (w, h) = (self.image_size.0 as f64, self.image_size.1 as f64);
        self.boxes
            .iter()
            .map(|b| [b[0] / w, b[1] / h, b[2] / w, b[3] / h])
            .collect()
    }

    pub fn select(&self, indices: &[usize]) -> RegionSet {
        RegionSet {
            boxes: indices.iter().map(|&i| self.boxes[i]).collect(),
            confidences: indices.iter().map(|&i| self.confidences[i]).collect(),
            image_size: self.image_size,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DedupConfig {
    pub clusters: usize,
    pub seed: u64,
    pub restarts: usize,
    pub max_iters: usize,
}

impl Default for DedupConfig {
    fn default() -> Self {
        Self {
            clusters: 20,
            seed: 0,
            restarts: 10,
            max_iters: 100,
        }
    }
}

/// Result of [`dedup_regions`].
#[derive(Clone, Debug, PartialEq)]
pub struct Dedup {
    /// Kept boxes, highest confidence first.
    pub regions: RegionSet,
    /// Candidate index of each kept box.
    pub kept: Vec<usize>,
    /// For every candidate, the output index of its cluster representative.
    pub assignment: Vec<usize>,
}

fn geometry(set: &RegionSet) -> Vec<[f64; 4]> {
    let (w, h) = (set.image_size.0 as f64, set.image_size.1 as f64);
    set.boxes
        .iter()
        .map(|b| {
            [
                (b[0] + b[2]) / (2.0 * w),
                (b[1] + b[3]) / (2.0 * h),
                (b[2] - b[0]) / w,
                (b[3] - b[1]) / h,
            ]
        })
        .collect()
}

fn dist2(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid, lowest index on ties.
fn nearest(p: &[f64; 4], centroids: &[[f64; 4]]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = dist2(p, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

struct Clustering {
    labels: Vec<usize>,
    inertia: f64,
}

fn kmeans_once(
    points: &[[f64; 4]],
    k: usize,
    max_iters: usize,
    rng: &mut ChaCha8Rng,
) -> Clustering {
    // k-means++ seeding over distinct points
    let mut centroids: Vec<[f64; 4]> = vec![points[rng.random_range(0..points.len())]];
    while centroids.len() < k {
        let d: Vec<f64> = points.iter().map(|p| nearest(p, &centroids).1).collect();
        let total: f64 = d.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut pick = d.iter().rposition(|&x| x > 0.0).unwrap_or(0);
        for (i, &di) in d.iter().enumerate() {
            if di <= 0.0 {
                continue;
            }
            if target < di {
                pick = i;
                break;
            }
            target -= di;
        }
        centroids.push(points[pick]);
    }

    let mut labels = vec![usize::MAX; points.len()];
    for _ in 0..max_iters {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let (l, _) = nearest(p, &centroids);
            if labels[i] != l {
                labels[i] = l;
                changed = true;
            }
        }
        // keep every cluster populated: steal the point farthest from its centroid
        for c in 0..k {
            if !labels.contains(&c) {
                let far = (0..points.len())
                    .filter(|&i| labels.iter().filter(|&&l| l == labels[i]).count() > 1)
                    .max_by(|&a, &b| {
                        let da = dist2(&points[a], &centroids[labels[a]]);
                        let db = dist2(&points[b], &centroids[labels[b]]);
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .expect("more distinct points than clusters");
                labels[far] = c;
                centroids[c] = points[far];
                changed = true;
            }
        }
        for (c, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<&[f64; 4]> = points
                .iter()
                .zip(&labels)
                .filter(|(_, &l)| l == c)
                .map(|(p, _)| p)
                .collect();
            let n = members.len() as f64;
            let mut mean = [0.0; 4];
            for m in members {
                for (a, v) in mean.iter_mut().zip(m) {
                    *a += v / n;
                }
            }
            *centroid = mean;
        }
        if !changed {
            break;
        }
    }
    let inertia = points
        .iter()
        .zip(&labels)
        .map(|(p, &l)| dist2(p, &centroids[l]))
        .sum();
    Clustering { labels, inertia }
}

/// Clusters candidate boxes on normalized `(cx, cy, w, h)` with K-means and
/// keeps the most confident box per cluster.
///
/// The number of clusters is `min(k, distinct boxes)`. Output is ordered by
/// descending confidence; equal confidences keep the lower candidate index.
pub fn dedup_regions(candidates: &RegionSet, cfg: &DedupConfig) -> Result<Dedup> {
    if candidates.is_empty() {
        return Err(Error::NoRegions);
    }
    if cfg.clusters == 0 {
        return Err(Error::InvalidArgument(
            "cluster count must be positive".into(),
        ));
    }
    candidates.validate()?;

    let feats = geometry(candidates);
    let mut distinct: Vec<[f64; 4]> = Vec::new();
    let mut distinct_of = Vec::with_capacity(feats.len());
    for f in &feats {
        match distinct.iter().position(|d| d == f) {
            Some(i) => distinct_of.push(i),
            None => {
                distinct_of.push(distinct.len());
                distinct.push(*f);
            }
        }
    }
    let k = cfg.clusters.min(distinct.len());

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<Clustering> = None;
    for _ in 0..cfg.restarts.max(1) {
        let run = kmeans_once(&distinct, k, cfg.max_iters, &mut rng);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    let best = best.expect("at least one restart");
    let label_of: Vec<usize> = distinct_of.iter().map(|&d| best.labels[d]).collect();

    // representative per cluster: max confidence, lowest index on ties
    let mut rep = vec![usize::MAX; k];
    for (i, &l) in label_of.iter().enumerate() {
        let r = rep[l];
        if r == usize::MAX || candidates.confidences[i] > candidates.confidences[r] {
            rep[l] = i;
        }
    }
    let mut kept = rep.clone();
    kept.sort_by(|&a, &b| {
        candidates.confidences[b]
            .total_cmp(&candidates.confidences[a])
            .then(a.cmp(&b))
    });
    let out_index_of_cluster: Vec<usize> = rep
        .iter()
        .map(|r| {
            kept.iter()
                .position(|k| k == r)
                .expect("representative kept")
        })
        .collect();
    let assignment = label_of.iter().map(|&l| out_index_of_cluster[l]).collect();

    Ok(Dedup {
        regions: candidates.select(&kept),
        kept,
        assignment,
    })
}
