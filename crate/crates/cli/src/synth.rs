use std::path::PathBuf;

use clap::Args;
use infometic_core::synth::{generate, write_corpus, SynthConfig};
use infometic_core::SyntheticBackbone;
use serde::{Deserialize, Serialize};

use crate::config::{log_config, overlay_fields, require, GlobalArgs};
use crate::failure::{Context, Failure};

#[derive(Clone, Debug, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthArgs {
    /// Output directory for PNG images and dataset.jsonl.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Number of images [default: 200].
    #[arg(long)]
    pub images: Option<usize>,
    /// Number of object kinds [default: 12].
    #[arg(long)]
    pub nouns: Option<usize>,
    /// Cosine between an object's appearance and its word [default: 0.8].
    #[arg(long)]
    pub alignment: Option<f64>,
    /// Dimension of the synthetic backbone the appearances target [default: 16].
    #[arg(long)]
    pub dim: Option<usize>,
}

overlay_fields!(SynthArgs {
    out_dir,
    images,
    nouns,
    alignment,
    dim
});

pub fn run(global: &GlobalArgs, args: SynthArgs) -> Result<(), Failure> {
    let out_dir = require(&args.out_dir, "out-dir")?;
    let d = SynthConfig::default();
    let cfg = SynthConfig {
        num_images: args.images.unwrap_or(d.num_images),
        num_nouns: args.nouns.unwrap_or(d.num_nouns),
        alignment: args.alignment.unwrap_or(d.alignment),
        seed: global.seed(),
        ..d
    };
    let dim = args.dim.unwrap_or(16);
    log_config(
        "synth",
        global,
        serde_json::json!({ "out_dir": out_dir, "dim": dim, "world": cfg }),
    );
    let backbone = SyntheticBackbone::new(dim, global.backbone_seed());
    let samples = generate(&cfg, &backbone)?;
    write_corpus(&samples, out_dir).context(out_dir.display())
}
