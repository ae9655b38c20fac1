use std::io::{BufWriter, Write};
use std::path::PathBuf;

use clap::{Args, ValueEnum};
use infometic_core::datagen::TrainingSets;
use infometic_core::dataset::{read_jsonl, DatasetRecord};
use infometic_core::fusion::FusionConfig;
use infometic_core::training::{train, windowed_nce, TrainConfig, TrainingData};
use infometic_core::{Error, Model, ModelConfig};
use serde::{Deserialize, Serialize};

use crate::config::{log_config, overlay_fields, require, BackboneKind, GlobalArgs};
use crate::datagen::Manifest;
use crate::failure::{Context, Failure};

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// d=16, 2+1 layers, batch 8, 2000 iterations.
    #[default]
    Desk,
    /// d=512, 4+2 layers, batch 32, 32000 iterations.
    Full,
}

#[derive(Clone, Debug, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainArgs {
    /// Directory written by `datagen`.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Output directory for the checkpoint and metrics log.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Size preset [default: desk].
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Feature dimension; defaults to the preset's or the adapter's.
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Coarse steps per alternation period [default: 3].
    #[arg(long)]
    pub coarse_steps: Option<usize>,
    /// Fine steps per alternation period [default: 1].
    #[arg(long)]
    pub fine_steps: Option<usize>,
    /// Residual dropout inside the fusion stacks [default: 0.1].
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Disable the hard textual negative loss.
    #[arg(long = "no-htn", num_args = 0, default_missing_value = "false")]
    pub htn: Option<bool>,
    /// Disable the fine-grained scoring task.
    #[arg(long = "no-fine", num_args = 0, default_missing_value = "false")]
    pub fine: Option<bool>,
    /// Save an intermediate checkpoint every N steps (0 = never).
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

overlay_fields!(TrainArgs {
    data_dir,
    out_dir,
    preset,
    dim,
    iters,
    batch_size,
    lr,
    coarse_steps,
    fine_steps,
    dropout,
    htn,
    fine,
    checkpoint_every
});

impl TrainArgs {
    /// Preset configs with overrides applied. `adapter_dim` is the feature
    /// file's dimension when the pretrained adapter is used.
    pub fn resolve(
        &self,
        seed: u64,
        adapter_dim: Option<usize>,
    ) -> Result<(ModelConfig, TrainConfig), Failure> {
        let preset = self.preset.unwrap_or_default();
        let (mut model, mut cfg) = match preset {
            Preset::Desk => (ModelConfig::desk(16, seed), TrainConfig::desk(seed)),
            Preset::Full => (
                ModelConfig {
                    seed,
                    ..ModelConfig::default()
                },
                TrainConfig {
                    seed,
                    ..TrainConfig::default()
                },
            ),
        };
        if let Some(d) = self.dim.or(adapter_dim) {
            model.fusion = FusionConfig { d, ..model.fusion };
        }
        if let Some(p) = self.dropout {
            model.fusion.dropout = p;
        }
        model.fusion.validate()?;
        macro_rules! set {
            ($($f:ident => $g:ident),*) => { $(if let Some(v) = self.$f { cfg.$g = v; })* };
        }
        set!(iters => total_iters, batch_size => batch_size, lr => lr,
             coarse_steps => coarse_steps, fine_steps => fine_steps,
             htn => use_htn, fine => use_fine, checkpoint_every => checkpoint_every);
        cfg.validate()?;
        Ok((model, cfg))
    }
}

pub fn run(global: &GlobalArgs, args: TrainArgs) -> Result<(), Failure> {
    let data_dir = require(&args.data_dir, "data-dir")?;
    let out_dir = require(&args.out_dir, "out-dir")?;
    let adapter = match global.backbone_kind() {
        BackboneKind::Synthetic => None,
        BackboneKind::PretrainedAdapter => Some(global.open_backbone(None)?),
    };
    let (model_cfg, cfg) = args.resolve(global.seed(), adapter.as_ref().map(|b| b.dim()))?;
    log_config(
        "train",
        global,
        serde_json::json!({
            "data_dir": data_dir,
            "out_dir": out_dir,
            "preset": args.preset.unwrap_or_default(),
            "model": model_cfg,
            "train": cfg,
        }),
    );
    let backbone = match adapter {
        Some(b) => b,
        None => global.open_backbone(Some(model_cfg.fusion.d))?,
    };

    let manifest = Manifest::read(data_dir)?;
    let records: Vec<DatasetRecord> =
        read_jsonl(&manifest.dataset).context(manifest.dataset.display())?;
    let sets = TrainingSets::read(data_dir).context(data_dir.display())?;
    let data = TrainingData::build(
        &records,
        &sets,
        backbone.as_ref(),
        &model_cfg.semantic_pos,
        |r| r.load_image(&manifest.image_root),
    )?;
    eprintln!(
        "training on {} images, {} coarse pairs, {} fine text, {} fine vision samples",
        data.images.len(),
        data.coarse.len(),
        data.fine_text.len(),
        data.fine_vision.len()
    );

    std::fs::create_dir_all(out_dir).context(out_dir.display())?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let file = std::fs::File::create(&metrics_path).context(metrics_path.display())?;
    let mut log = BufWriter::new(file);
    let mut model = Model::new(model_cfg)?;
    let result = train(&mut model, &data, &cfg, |m, model| {
        let line = serde_json::to_string(m)?;
        writeln!(log, "{line}").map_err(|e| Error::Io {
            path: metrics_path.clone(),
            source: e,
        })?;
        let step = m.iter + 1;
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            eprintln!("step {step}/{}: loss {:.4}", cfg.total_iters, m.total());
        }
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            model.save(&out_dir.join(format!("{CHECKPOINT_DIR}-{step}")))?;
        }
        Ok(())
    });
    log.flush().context(metrics_path.display())?;
    let steps = result?;
    model.save(&out_dir.join(CHECKPOINT_DIR))?;
    let window = (steps.len() / 40).max(1);
    if let (Some(first), Some(last)) = {
        let w = windowed_nce(&steps, window);
        (w.first().copied(), w.last().copied())
    } {
        eprintln!("windowed NCE loss {first:.4} -> {last:.4}");
    }
    Ok(())
}
