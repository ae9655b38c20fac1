use std::path::{Path, PathBuf};

use clap::Args;
use infometic_core::datagen::{
    build_training_sets, dedup_record, validate_training_sets, DatagenConfig, PollutionVocab,
    SkippedRecord, ValidationReport,
};
use infometic_core::dataset::{read_jsonl, write_jsonl, DatasetRecord};
use infometic_core::encoding::{DedupConfig, PosSet};
use serde::{Deserialize, Serialize};

use crate::config::{emit, log_config, overlay_fields, require, GlobalArgs};
use crate::failure::{Context, Failure};

pub const MANIFEST_FILE: &str = "datagen.json";
pub const DEDUP_DATASET_FILE: &str = "dataset.jsonl";

#[derive(Clone, Debug, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatagenArgs {
    /// Dataset JSONL; image paths resolve against its directory.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Output directory for the four training files and the manifest.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Replacement candidates kept per POS tag [default: 100].
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Cluster each record's boxes before generation.
    #[arg(long, num_args = 0, default_missing_value = "true")]
    pub dedup: Option<bool>,
    /// Boxes kept per image by --dedup [default: 20].
    #[arg(long)]
    pub clusters: Option<usize>,
}

overlay_fields!(DatagenArgs {
    dataset,
    out_dir,
    top_k,
    dedup,
    clusters
});

/// Written next to the training files; tells `train` where the corpus is.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset: PathBuf,
    pub image_root: PathBuf,
    pub config: DatagenConfig,
    pub counts: Counts,
    pub skipped: Vec<SkippedRecord>,
    pub validation: ValidationReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub coarse: usize,
    pub htn: usize,
    pub fine_text: usize,
    pub fine_vision: usize,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self, Failure> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).context(path.display())?;
        serde_json::from_str(&text).context(path.display())
    }
}

fn absolute(p: &Path) -> Result<PathBuf, Failure> {
    std::path::absolute(p).context(p.display())
}

pub fn run(global: &GlobalArgs, args: DatagenArgs) -> Result<(), Failure> {
    let dataset = require(&args.dataset, "dataset")?;
    let out_dir = require(&args.out_dir, "out-dir")?;
    let cfg = DatagenConfig {
        seed: global.seed(),
        top_k: args.top_k.unwrap_or(PollutionVocab::DEFAULT_TOP_K),
        semantic: PosSet::training(),
    };
    let dedup = args.dedup.unwrap_or(false).then(|| DedupConfig {
        clusters: args.clusters.unwrap_or(DedupConfig::default().clusters),
        seed: global.seed(),
        ..DedupConfig::default()
    });
    log_config(
        "datagen",
        global,
        serde_json::json!({
            "dataset": dataset,
            "out_dir": out_dir,
            "datagen": cfg,
            "dedup": dedup,
        }),
    );

    let image_root = absolute(dataset.parent().unwrap_or(Path::new(".")))?;
    let mut records: Vec<DatasetRecord> = read_jsonl(dataset).context(dataset.display())?;
    std::fs::create_dir_all(out_dir).context(out_dir.display())?;
    let mut source = absolute(dataset)?;
    if let Some(dc) = &dedup {
        records = records
            .iter()
            .map(|r| {
                let image = r.load_image(&image_root).context(&r.image_id)?;
                dedup_record(r, image.dimensions(), dc).context(&r.image_id)
            })
            .collect::<Result<_, Failure>>()?;
        source = absolute(&out_dir.join(DEDUP_DATASET_FILE))?;
        write_jsonl(&source, &records)?;
    }

    let (sets, _) = build_training_sets(&records, &cfg)?;
    sets.write(out_dir)?;
    let validation = validate_training_sets(&records, &sets, &cfg.semantic)?;
    let manifest = Manifest {
        dataset: source,
        image_root,
        counts: Counts {
            coarse: sets.coarse.len(),
            htn: sets.htn.len(),
            fine_text: sets.fine_text.len(),
            fine_vision: sets.fine_vision.len(),
        },
        config: cfg,
        skipped: sets.skipped.clone(),
        validation,
    };
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    let path = out_dir.join(MANIFEST_FILE);
    std::fs::write(&path, &text).context(path.display())?;
    for s in &manifest.skipped {
        eprintln!("skipped {}: {}", s.image_id, s.reason);
    }
    if !manifest.validation.passed() {
        return Err(Failure::input(format!(
            "generated sets failed validation: {}",
            manifest.validation.problems.join("; ")
        )));
    }
    emit(None, &text)
}
