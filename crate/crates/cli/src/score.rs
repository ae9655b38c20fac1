use std::path::{Path, PathBuf};

use clap::Args;
use image::RgbImage;
use infometic_core::dataset::{read_jsonl, DatasetRecord};
use infometic_core::encoding::{extract_caption_tokens, extract_image_tokens, RegionSet};
use infometic_core::scoring::{score_features, score_pair, DEFAULT_BETA};
use infometic_core::{EmbeddingBackbone, Error, Model, ScoreOptions, ScoreReport, TaggedCaption};
use serde::{Deserialize, Serialize};

use crate::config::{emit, log_config, overlay_fields, require, GlobalArgs};
use crate::failure::{Context, Failure};

#[derive(Clone, Debug, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreArgs {
    /// Image file for a single pair.
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// JSON regions file: {"boxes": [[x1, y1, x2, y2], ...], "confidences": [...]}.
    #[arg(long)]
    pub regions: Option<PathBuf>,
    /// POS-tagged caption, e.g. "a/DET dog/NOUN runs/VERB".
    #[arg(long)]
    pub caption: Option<String>,
    /// Dataset JSONL; every caption of every record is scored.
    #[arg(long)]
    pub input_jsonl: Option<PathBuf>,
    /// Token threshold for word and region decisions [default: 0.1].
    #[arg(long)]
    pub beta: Option<f64>,
    /// Also report the plus score (needs a backbone temperature).
    #[arg(long, num_args = 0, default_missing_value = "true")]
    pub plus: Option<bool>,
    /// Output file instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads for batch scoring [default: 1].
    #[arg(long)]
    pub jobs: Option<usize>,
}

overlay_fields!(ScoreArgs {
    image,
    regions,
    caption,
    input_jsonl,
    beta,
    plus,
    out,
    jobs
});

/// Regions file contents. Confidences default to 1.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionsFile {
    pub boxes: Vec<[f64; 4]>,
    #[serde(default)]
    pub confidences: Option<Vec<f64>>,
}

/// A single pair given by flags.
pub struct PairInput {
    pub image: RgbImage,
    pub regions: RegionSet,
    pub caption: TaggedCaption,
}

impl PairInput {
    pub fn load(image: &Path, regions: &Path, caption: &str) -> Result<Self, Failure> {
        let image = image::open(image)
            .map_err(Error::from)
            .context(image.display())?
            .to_rgb8();
        let text = std::fs::read_to_string(regions).context(regions.display())?;
        let file: RegionsFile = serde_json::from_str(&text).context(regions.display())?;
        let n = file.boxes.len();
        let regions = RegionSet::new(
            file.boxes,
            file.confidences.unwrap_or_else(|| vec![1.0; n]),
            image.dimensions(),
        )
        .context(regions.display())?;
        let caption = TaggedCaption::parse_slashed(caption).context("caption")?;
        Ok(Self {
            image,
            regions,
            caption,
        })
    }
}

pub fn options(beta: Option<f64>, plus: Option<bool>) -> Result<ScoreOptions, Failure> {
    let beta = beta.unwrap_or(DEFAULT_BETA);
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Failure::input(format!(
            "--beta must be in (0, 1), got {beta}"
        )));
    }
    Ok(ScoreOptions {
        beta,
        plus: plus.unwrap_or(false),
    })
}

pub fn run(global: &GlobalArgs, args: ScoreArgs) -> Result<(), Failure> {
    let opts = options(args.beta, args.plus)?;
    let jobs = args.jobs.unwrap_or(1);
    if jobs == 0 {
        return Err(Failure::input("--jobs must be positive"));
    }
    log_config(
        "score",
        global,
        serde_json::json!({
            "image": args.image,
            "regions": args.regions,
            "caption": args.caption,
            "input_jsonl": args.input_jsonl,
            "beta": opts.beta,
            "plus": opts.plus,
            "out": args.out,
            "jobs": jobs,
        }),
    );

    let model = global.load_model()?;
    let backbone = global.open_backbone(Some(model.d()))?;
    if opts.plus && backbone.logit_temperature().is_none() {
        return Err(Error::MissingTemperature.into());
    }
    let reports = match &args.input_jsonl {
        Some(path) => {
            if args.image.is_some() || args.regions.is_some() || args.caption.is_some() {
                return Err(Failure::input(
                    "--input-jsonl cannot be combined with --image, --regions or --caption",
                ));
            }
            score_batch(path, &model, backbone.as_ref(), opts, jobs)?
        }
        None => {
            let pair = PairInput::load(
                require(&args.image, "image")?,
                require(&args.regions, "regions")?,
                require(&args.caption, "caption")?,
            )?;
            vec![score_pair(
                &pair.image,
                &pair.regions,
                &pair.caption,
                &model,
                backbone.as_ref(),
                opts,
            )?]
        }
    };
    let mut text = String::new();
    for r in &reports {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    emit(args.out.as_deref(), &text)
}

fn score_record(
    r: &DatasetRecord,
    base: &Path,
    model: &Model,
    backbone: &dyn EmbeddingBackbone,
    opts: ScoreOptions,
) -> Result<Vec<ScoreReport>, Failure> {
    let image = r.load_image(base).context(&r.image_id)?;
    let regions = r.regions(image.dimensions()).context(&r.image_id)?;
    let img = extract_image_tokens(&image, &regions, backbone).context(&r.image_id)?;
    let mut out = Vec::with_capacity(r.captions.len());
    for (idx, c) in r.captions.iter().enumerate() {
        let what = format!("{} caption {idx}", r.image_id);
        let cap = c.tagged().context(&what)?;
        let cap = extract_caption_tokens(&cap, backbone, &model.config.eval_pos).context(&what)?;
        let mut report = score_features(
            model,
            &img,
            &cap,
            &regions.boxes,
            backbone.logit_temperature(),
            opts,
        )
        .context(&what)?;
        report.image_id = Some(r.image_id.clone());
        report.caption_idx = Some(idx);
        out.push(report);
    }
    Ok(out)
}

/// Scores every caption of every record; output follows input order for
/// any number of workers.
pub fn score_batch(
    path: &Path,
    model: &Model,
    backbone: &dyn EmbeddingBackbone,
    opts: ScoreOptions,
    jobs: usize,
) -> Result<Vec<ScoreReport>, Failure> {
    let records: Vec<DatasetRecord> = read_jsonl(path).context(path.display())?;
    let base = path.parent().unwrap_or(Path::new("."));
    let chunk = records.len().div_ceil(jobs).max(1);
    let results: Vec<Result<Vec<ScoreReport>, Failure>> = std::thread::scope(|s| {
        let handles: Vec<_> = records
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    let mut out = Vec::new();
                    for r in part {
                        out.extend(score_record(r, base, model, backbone, opts)?);
                    }
                    Ok(out)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("scoring worker panicked"))
            .collect()
    });
    let mut reports = Vec::new();
    for r in results {
        reports.extend(r?);
    }
    Ok(reports)
}
