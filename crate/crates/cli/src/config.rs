//! Flag and config-file merging shared by all commands.
//!
//! A config file is TOML whose top-level keys are the global flags and whose
//! tables (`[score]`, `[train]`, ...) hold each command's flags, spelled with
//! underscores. Flags given on the command line win over the file.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use infometic_core::encoding::FeatureFileBackbone;
use infometic_core::{EmbeddingBackbone, Model, SyntheticBackbone};
use serde::{Deserialize, Serialize};

use crate::failure::{Context, Failure};

/// Fills every `None` field of `$a` from `$b`.
macro_rules! overlay_fields {
    ($ty:ident { $($f:ident),* $(,)? }) => {
        impl $ty {
            pub fn overlay(mut self, other: Self) -> Self {
                $(if self.$f.is_none() { self.$f = other.$f; })*
                self
            }
        }
    };
}
pub(crate) use overlay_fields;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    /// Deterministic hashed colour-code encoder.
    #[default]
    Synthetic,
    /// Embeddings exported ahead of time from a pretrained encoder.
    PretrainedAdapter,
}

#[derive(Clone, Debug, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GlobalArgs {
    /// Seed for every random choice [default: 0].
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Checkpoint directory (config.json + params.safetensors).
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Frozen token encoder [default: synthetic].
    #[arg(long, global = true, value_enum)]
    pub backbone: Option<BackboneKind>,
    /// Seed of the synthetic backbone's colour codes [default: 0].
    #[arg(long, global = true)]
    pub backbone_seed: Option<u64>,
    /// Exported feature file read by the pretrained adapter.
    #[arg(long, global = true)]
    pub features: Option<PathBuf>,
    /// TOML config file mirroring the flags.
    #[arg(long, global = true)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

overlay_fields!(GlobalArgs {
    seed,
    checkpoint,
    backbone,
    backbone_seed,
    features,
    config
});

impl GlobalArgs {
    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn backbone_kind(&self) -> BackboneKind {
        self.backbone.unwrap_or_default()
    }

    pub fn backbone_seed(&self) -> u64 {
        self.backbone_seed.unwrap_or(0)
    }

    pub fn resolved(&self) -> serde_json::Value {
        serde_json::json!({
            "seed": self.seed(),
            "checkpoint": self.checkpoint,
            "backbone": self.backbone_kind(),
            "backbone_seed": self.backbone_seed(),
            "features": self.features,
            "config": self.config,
        })
    }

    /// Loads the checkpoint; any failure exits with the checkpoint code.
    pub fn load_model(&self) -> Result<Model, Failure> {
        let dir = self
            .checkpoint
            .as_ref()
            .ok_or_else(|| Failure::input("--checkpoint is required"))?;
        Model::load(dir).map_err(|e| Failure::checkpoint(format!("{}: {e}", dir.display())))
    }

    /// Opens the backbone at dimension `d`; `None` takes the adapter's own.
    pub fn open_backbone(&self, d: Option<usize>) -> Result<Box<dyn EmbeddingBackbone>, Failure> {
        let b: Box<dyn EmbeddingBackbone> = match self.backbone_kind() {
            BackboneKind::Synthetic => {
                let d = d.ok_or_else(|| Failure::input("synthetic backbone needs a dimension"))?;
                Box::new(SyntheticBackbone::new(d, self.backbone_seed()))
            }
            BackboneKind::PretrainedAdapter => {
                let path = self.features.as_ref().ok_or_else(|| {
                    Failure::input("--features is required with the pretrained adapter")
                })?;
                Box::new(FeatureFileBackbone::load(path).context(path.display())?)
            }
        };
        if let Some(d) = d {
            if b.dim() != d {
                return Err(Failure::checkpoint(format!(
                    "backbone dimension {} does not match model dimension {d}",
                    b.dim()
                )));
            }
        }
        Ok(b)
    }
}

/// Parsed config file.
#[derive(Debug, Default)]
pub struct FileConfig {
    pub global: GlobalArgs,
    pub score: crate::score::ScoreArgs,
    pub train: crate::train::TrainArgs,
    pub datagen: crate::datagen::DatagenArgs,
    pub bench: crate::bench::BenchArgs,
    pub visualize: crate::visualize::VisualizeArgs,
    pub synth: crate::synth::SynthArgs,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path).context(path.display())?;
        Self::parse(&text).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, toml::de::Error> {
        let mut table: toml::Table = text.parse()?;
        fn take<T: for<'de> Deserialize<'de> + Default>(
            table: &mut toml::Table,
            key: &str,
        ) -> Result<T, toml::de::Error> {
            match table.remove(key) {
                Some(v) => v.try_into(),
                None => Ok(T::default()),
            }
        }
        let score = take(&mut table, "score")?;
        let train = take(&mut table, "train")?;
        let datagen = take(&mut table, "datagen")?;
        let bench = take(&mut table, "bench")?;
        let visualize = take(&mut table, "visualize")?;
        let synth = take(&mut table, "synth")?;
        let global = toml::Value::Table(table).try_into()?;
        Ok(Self {
            global,
            score,
            train,
            datagen,
            bench,
            visualize,
            synth,
        })
    }
}

/// Prints the resolved configuration of `command` to stderr.
pub fn log_config(command: &str, global: &GlobalArgs, args: serde_json::Value) {
    let v = serde_json::json!({
        "command": command,
        "global": global.resolved(),
        "args": args,
    });
    eprintln!("resolved config: {v}");
}

pub fn require<'a, T>(v: &'a Option<T>, flag: &str) -> Result<&'a T, Failure> {
    v.as_ref()
        .ok_or_else(|| Failure::input(format!("--{flag} is required")))
}

/// Writes `text` to `out`, or to stdout when `out` is `None`.
pub fn emit(out: Option<&Path>, text: &str) -> Result<(), Failure> {
    match out {
        Some(p) => std::fs::write(p, text).context(p.display()),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
            Ok(())
        }
    }
}
