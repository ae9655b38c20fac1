//! Model configuration, parameter storage and checkpoints.
//!
//! A checkpoint is a directory holding `config.json` and `params.safetensors`
//! (all tensors stored as F64). Loading checks that every expected tensor is
//! present with the expected shape and that no unknown tensors exist.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::encoding::PosSet;
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, BLOCK_TENSORS};

pub const TAU_MIN: f64 = 1e-3;
pub const TAU_MAX: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub fusion: FusionConfig,
    /// Initial value of the shared learnable temperature.
    pub tau_init: f64,
    pub semantic_pos: PosSet,
    pub eval_pos: PosSet,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            fusion: FusionConfig::default(),
            tau_init: 0.07,
            semantic_pos: PosSet::training(),
            eval_pos: PosSet::evaluation(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn desk(d: usize, seed: u64) -> Self {
        Self {
            fusion: FusionConfig::desk(d),
            seed,
            ..Self::default()
        }
    }
}

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }
}

/// Parameter handles on one graph.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Trainable fusion and scoring parameters with their configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// Expected tensor shapes for a configuration.
pub fn parameter_shapes(cfg: &ModelConfig) -> BTreeMap<String, (usize, usize)> {
    let f = &cfg.fusion;
    let d = f.d;
    let hidden = d * f.ffn_mult;
    let mut shapes = BTreeMap::new();
    shapes.insert("fusion.vision_pos.weight".to_string(), (4, d));
    shapes.insert("fusion.vision_pos.bias".to_string(), (1, d));
    shapes.insert("fusion.vision_global_pos".to_string(), (1, d));
    shapes.insert("fusion.vision_null_pos".to_string(), (1, d));
    shapes.insert("fusion.text_pos".to_string(), (f.max_text_len, d));
    let stacks = [
        ("fusion.vision_intra", f.n_intra_layers),
        ("fusion.text_intra", f.n_intra_layers),
        ("fusion.inter", f.n_inter_layers),
    ];
    for (prefix, layers) in stacks {
        for i in 0..layers {
            for name in BLOCK_TENSORS {
                let shape = match name {
                    "attn.qkv.weight" => (d, 3 * d),
                    "attn.qkv.bias" => (1, 3 * d),
                    "attn.out.weight" => (d, d),
                    "ffn.in.weight" => (d, hidden),
                    "ffn.in.bias" => (1, hidden),
                    "ffn.out.weight" => (hidden, d),
                    _ => (1, d),
                };
                shapes.insert(format!("{prefix}.{i}.{name}"), shape);
            }
        }
    }
    for name in [
        "scoring.wq_v",
        "scoring.wk_v",
        "scoring.wq_t",
        "scoring.wk_t",
    ] {
        shapes.insert(name.to_string(), (d, d));
    }
    shapes.insert("scoring.tau".to_string(), (1, 1));
    shapes
}

impl Model {
    /// Randomly initialized model, reproducible from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.fusion.validate()?;
        if !(TAU_MIN..=TAU_MAX).contains(&config.tau_init) {
            return Err(Error::InvalidArgument(format!(
                "tau_init must lie in [{TAU_MIN}, {TAU_MAX}]"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::default();
        for (name, (r, c)) in parameter_shapes(&config) {
            let t = if name == "scoring.tau" {
                Array2::from_elem((1, 1), config.tau_init)
            } else if name.starts_with("scoring.w") {
                // Start from the training-free scorer's plain dot-product attention.
                Array2::eye(r)
            } else if name.ends_with("gamma") {
                Array2::ones((r, c))
            } else if name.ends_with("beta") || name.ends_with("bias") {
                Array2::zeros((r, c))
            } else {
                let std = if name.contains("_pos") {
                    0.1
                } else if name.ends_with("out.weight") {
                    0.1 / (r as f64).sqrt()
                } else {
                    1.0 / (r as f64).sqrt()
                };
                let normal = Normal::new(0.0, std).expect("finite std");
                Array2::from_shape_simple_fn((r, c), || normal.sample(&mut rng))
            };
            params.insert(name, t);
        }
        Ok(Self { config, params })
    }

    pub fn d(&self) -> usize {
        self.config.fusion.d
    }

    pub fn tau(&self) -> f64 {
        self.params.get("scoring.tau").expect("tau present")[[0, 0]]
    }

    pub fn clamp_tau(&mut self) {
        if let Some(t) = self.params.get_mut("scoring.tau") {
            t[[0, 0]] = t[[0, 0]].clamp(TAU_MIN, TAU_MAX);
        }
    }

    /// Adds every parameter to `g` as a differentiable leaf.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a>) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(n, t)| (n.clone(), g.param_ref(t)))
            .collect();
        Bound { vars }
    }

    /// Adds every parameter to `g` without gradient tracking.
    pub fn bind_constants<'a>(&'a self, g: &mut Graph<'a>) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(n, t)| (n.clone(), g.constant_ref(t)))
            .collect();
        Bound { vars }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let config = serde_json::to_string_pretty(&CheckpointConfig {
            format: CHECKPOINT_FORMAT.to_string(),
            model: self.config.clone(),
        })?;
        let cfg_path = dir.join("config.json");
        std::fs::write(&cfg_path, config + "\n").map_err(|e| Error::io(&cfg_path, e))?;

        let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = self
            .params
            .iter()
            .map(|(n, t)| {
                let data = t.iter().flat_map(|v| v.to_le_bytes()).collect();
                (n.clone(), data, vec![t.nrows(), t.ncols()])
            })
            .collect();
        let views = bytes
            .iter()
            .map(|(n, data, shape)| {
                TensorView::new(Dtype::F64, shape.clone(), data)
                    .map(|v| (n.clone(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let blob =
            safetensors::serialize(views, None).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let path = dir.join("params.safetensors");
        std::fs::write(&path, blob).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join("config.json");
        let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let cfg: CheckpointConfig = serde_json::from_str(&text)?;
        if cfg.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!(
                "unsupported format '{}'",
                cfg.format
            )));
        }
        cfg.model.fusion.validate()?;
        let path = dir.join("params.safetensors");
        let blob = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let st = SafeTensors::deserialize(&blob).map_err(|e| Error::Checkpoint(e.to_string()))?;

        let expected = parameter_shapes(&cfg.model);
        for name in st.names() {
            if !expected.contains_key(name) {
                return Err(Error::Checkpoint(format!("unexpected tensor '{name}'")));
            }
        }
        let mut params = ParamStore::default();
        for (name, (r, c)) in expected {
            let view = st
                .tensor(&name)
                .map_err(|_| Error::Checkpoint(format!("missing tensor '{name}'")))?;
            if view.dtype() != Dtype::F64 {
                return Err(Error::Checkpoint(format!("tensor '{name}' is not F64")));
            }
            if view.shape() != [r, c] {
                return Err(Error::Checkpoint(format!(
                    "tensor '{name}' has shape {:?}, expected [{r}, {c}]",
                    view.shape()
                )));
            }
            let values: Vec<f64> = view
                .data()
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Checkpoint(format!(
                    "tensor '{name}' has non-finite entries"
                )));
            }
            params.insert(
                name,
                Array2::from_shape_vec((r, c), values).expect("shape checked"),
            );
        }
        Ok(Self {
            config: cfg.model,
            params,
        })
    }
}

const CHECKPOINT_FORMAT: &str = "infometic-checkpoint-v1";

#[derive(Serialize, Deserialize)]
struct CheckpointConfig {
    format: String,
    model: ModelConfig,
}
