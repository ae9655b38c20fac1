//! Intra- and inter-modality fusion.
//!
//! Vision tokens `(v_g, v_1..v_m, v_null)` get box-derived position features,
//! text tokens get learned index positions. Each modality runs through its own
//! pre-norm transformer encoder; the two outputs are then concatenated and
//! passed through a single-stream cross-modal encoder.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::encoding::{CaptionTokenFeatures, ImageTokenFeatures, MAX_CAPTION_LEN};
use crate::error::{Error, Result};
use crate::model::{Bound, Model};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub d: usize,
    pub n_intra_layers: usize,
    pub n_inter_layers: usize,
    pub n_heads: usize,
    pub max_text_len: usize,
    /// Feed-forward hidden width as a multiple of `d`.
    pub ffn_mult: usize,
    /// Dropout applied to residual branches while training.
    pub dropout: f64,
    /// Include `v_g` in the vision sequence (off reproduces the no-global ablation).
    pub use_global_in_fusion: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            d: 512,
            n_intra_layers: 4,
            n_inter_layers: 2,
            n_heads: 8,
            max_text_len: MAX_CAPTION_LEN,
            ffn_mult: 4,
            dropout: 0.1,
            use_global_in_fusion: true,
        }
    }
}

impl FusionConfig {
    /// Small configuration used for tests and toy training.
    pub fn desk(d: usize) -> Self {
        Self {
            d,
            n_intra_layers: 2,
            n_inter_layers: 1,
            n_heads: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("n_intra_layers", self.n_intra_layers),
            ("n_inter_layers", self.n_inter_layers),
            ("n_heads", self.n_heads),
            ("max_text_len", self.max_text_len),
            ("ffn_mult", self.ffn_mult),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be at least 1")));
            }
        }
        if !self.d.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidArgument(format!(
                "d = {} is not divisible by n_heads = {}",
                self.d, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Post-fusion token features.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedFeatures {
    /// `(m + 1) x d`: fused regions followed by the fused null token.
    pub vision_out: Array2<f64>,
    /// `n x d`.
    pub text_out: Array2<f64>,
    /// Fused `v_g`; absent when the global token is excluded from fusion.
    pub vision_global_out: Option<Array1<f64>>,
}

/// Forward-pass mode. Training draws dropout masks from the given RNG.
pub enum Mode<'r> {
    Eval,
    Train {
        rng: &'r mut ChaCha8Rng,
        dropout: f64,
    },
}

impl Mode<'_> {
    fn dropout(&mut self, g: &mut Graph, x: Var) -> Var {
        match self {
            Mode::Eval => x,
            Mode::Train { dropout, .. } if *dropout == 0.0 => x,
            Mode::Train { rng, dropout } => {
                let keep = 1.0 - *dropout;
                let shape = g.value(x).raw_dim();
                let mask = Array2::from_shape_simple_fn(shape, || {
                    if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                let m = g.constant(mask);
                g.mul(x, m)
            }
        }
    }
}

/// Names of the tensors in one encoder block, relative to its prefix.
pub(crate) const BLOCK_TENSORS: [&str; 12] = [
    "ln1.gamma",
    "ln1.beta",
    "attn.qkv.weight",
    "attn.qkv.bias",
    "attn.out.weight",
    "attn.out.bias",
    "ln2.gamma",
    "ln2.beta",
    "ffn.in.weight",
    "ffn.in.bias",
    "ffn.out.weight",
    "ffn.out.bias",
];

fn block(g: &mut Graph, p: &Bound, prefix: &str, x: Var, n_heads: usize, mode: &mut Mode) -> Var {
    let t = |name: &str| p.get(&format!("{prefix}.{name}"));
    let d = g.value(x).ncols();
    let dh = d / n_heads;

    let h = g.layer_norm(x, t("ln1.gamma"), t("ln1.beta"));
    let qkv = g.matmul(h, t("attn.qkv.weight"));
    let qkv = g.add_row(qkv, t("attn.qkv.bias"));
    let mut heads = Vec::with_capacity(n_heads);
    for head in 0..n_heads {
        let q = g.slice_cols(qkv, head * dh, (head + 1) * dh);
        let k = g.slice_cols(qkv, d + head * dh, d + (head + 1) * dh);
        let v = g.slice_cols(qkv, 2 * d + head * dh, 2 * d + (head + 1) * dh);
        let kt = g.transpose(k);
        let logits = g.matmul(q, kt);
        let logits = g.scale(logits, 1.0 / (dh as f64).sqrt());
        let att = g.softmax_rows(logits);
        heads.push(g.matmul(att, v));
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)
    };
    let o = g.matmul(merged, t("attn.out.weight"));
    let o = g.add_row(o, t("attn.out.bias"));
    let o = mode.dropout(g, o);
    let x = g.add(x, o);

    let h = g.layer_norm(x, t("ln2.gamma"), t("ln2.beta"));
    let f = g.matmul(h, t("ffn.in.weight"));
    let f = g.add_row(f, t("ffn.in.bias"));
    let f = g.gelu(f);
    let f = g.matmul(f, t("ffn.out.weight"));
    let f = g.add_row(f, t("ffn.out.bias"));
    let f = mode.dropout(g, f);
    g.add(x, f)
}

pub(crate) fn encoder(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    layers: usize,
    x: Var,
    n_heads: usize,
    mode: &mut Mode,
) -> Var {
    (0..layers).fold(x, |x, i| {
        block(g, p, &format!("{prefix}.{i}"), x, n_heads, mode)
    })
}

fn check_dim(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::DimensionMismatch(format!(
            "{what} has dim {got}, model expects {want}"
        )));
    }
    Ok(())
}

/// Graph-side vision sequence `(v_g, v_1..v_m, v_null)` with positions added.
/// `v_g` is omitted when the model excludes it from fusion.
pub(crate) fn vision_sequence(
    g: &mut Graph,
    p: &Bound,
    cfg: &FusionConfig,
    img: &ImageTokenFeatures,
) -> Result<Var> {
    check_dim("image features", img.dim(), cfg.d)?;
    if img.norm_boxes.nrows() != img.num_regions() {
        return Err(Error::InvalidArgument(
            "missing boxes for some regions".into(),
        ));
    }
    let boxes = g.constant(img.norm_boxes.clone());
    let pos = g.matmul(boxes, p.get("fusion.vision_pos.weight"));
    let pos = g.add_row(pos, p.get("fusion.vision_pos.bias"));
    let regions = g.constant(img.region_feats.clone());
    let regions = g.add(regions, pos);
    let null = g.row(img.null_feat.as_slice().expect("contiguous"));
    let null = g.add(null, p.get("fusion.vision_null_pos"));
    if cfg.use_global_in_fusion {
        let global = g.row(img.global_feat.as_slice().expect("contiguous"));
        let global = g.add(global, p.get("fusion.vision_global_pos"));
        Ok(g.concat_rows(&[global, regions, null]))
    } else {
        Ok(g.concat_rows(&[regions, null]))
    }
}

/// Graph-side text sequence with learned index positions added.
pub(crate) fn text_sequence(
    g: &mut Graph,
    p: &Bound,
    cfg: &FusionConfig,
    cap: &CaptionTokenFeatures,
) -> Result<Var> {
    check_dim("caption features", cap.dim(), cfg.d)?;
    let n = cap.len();
    if n == 0 {
        return Err(Error::EmptyCaption);
    }
    if n > cfg.max_text_len {
        return Err(Error::InvalidArgument(format!(
            "caption has {n} tokens, more than max_text_len {}",
            cfg.max_text_len
        )));
    }
    let tokens = g.constant(cap.token_feats.clone());
    let table = p.get("fusion.text_pos");
    let pos = g.slice_rows(table, 0, n);
    Ok(g.add(tokens, pos))
}

/// Intra-modal vision encoding; the result can be shared across captions.
pub(crate) fn encode_vision(
    g: &mut Graph,
    p: &Bound,
    cfg: &FusionConfig,
    img: &ImageTokenFeatures,
    mode: &mut Mode,
) -> Result<Var> {
    let seq = vision_sequence(g, p, cfg, img)?;
    Ok(encoder(
        g,
        p,
        "fusion.vision_intra",
        cfg.n_intra_layers,
        seq,
        cfg.n_heads,
        mode,
    ))
}

/// Intra-modal text encoding; the result can be shared across images.
pub(crate) fn encode_text(
    g: &mut Graph,
    p: &Bound,
    cfg: &FusionConfig,
    cap: &CaptionTokenFeatures,
    mode: &mut Mode,
) -> Result<Var> {
    let seq = text_sequence(g, p, cfg, cap)?;
    Ok(encoder(
        g,
        p,
        "fusion.text_intra",
        cfg.n_intra_layers,
        seq,
        cfg.n_heads,
        mode,
    ))
}

/// Fused graph outputs for one pair.
#[derive(Clone, Copy, Debug)]
pub(crate) struct FusedVars {
    pub vision_global: Option<Var>,
    /// `(m + 1) x d`
    pub vision: Var,
    /// `n x d`
    pub text: Var,
}

/// Cross-modal encoding of one (image, caption) pair from intra-encoded parts.
pub(crate) fn fuse_encoded(
    g: &mut Graph,
    p: &Bound,
    cfg: &FusionConfig,
    vision: Var,
    text: Var,
    mode: &mut Mode,
) -> FusedVars {
    let nv = g.value(vision).nrows();
    let nt = g.value(text).nrows();
    let joint = g.concat_rows(&[vision, text]);
    let out = encoder(
        g,
        p,
        "fusion.inter",
        cfg.n_inter_layers,
        joint,
        cfg.n_heads,
        mode,
    );
    let (vision_global, start) = if cfg.use_global_in_fusion {
        (Some(g.slice_rows(out, 0, 1)), 1)
    } else {
        (None, 0)
    };
    FusedVars {
        vision_global,
        vision: g.slice_rows(out, start, nv),
        text: g.slice_rows(out, nv, nv + nt),
    }
}

/// Box positions added to region features (first `m` rows), followed by the
/// positioned global and null tokens, in sequence order.
pub fn add_vision_positions(model: &Model, img: &ImageTokenFeatures) -> Result<Array2<f64>> {
    let mut g = Graph::new();
    let p = model.bind_constants(&mut g);
    let seq = vision_sequence(&mut g, &p, &model.config.fusion, img)?;
    Ok(g.value(seq).clone())
}

pub fn add_text_positions(model: &Model, cap: &CaptionTokenFeatures) -> Result<Array2<f64>> {
    let mut g = Graph::new();
    let p = model.bind_constants(&mut g);
    let seq = text_sequence(&mut g, &p, &model.config.fusion, cap)?;
    Ok(g.value(seq).clone())
}

/// Runs both intra-modal encoders and the inter-modal encoder in eval mode.
pub fn fuse(
    model: &Model,
    img: &ImageTokenFeatures,
    cap: &CaptionTokenFeatures,
) -> Result<FusedFeatures> {
    let cfg = &model.config.fusion;
    let mut g = Graph::new();
    let p = model.bind_constants(&mut g);
    let mut mode = Mode::Eval;
    let v = encode_vision(&mut g, &p, cfg, img, &mut mode)?;
    let t = encode_text(&mut g, &p, cfg, cap, &mut mode)?;
    let fused = fuse_encoded(&mut g, &p, cfg, v, t, &mut mode);
    Ok(FusedFeatures {
        vision_out: g.value(fused.vision).clone(),
        text_out: g.value(fused.text).clone(),
        vision_global_out: fused.vision_global.map(|v| g.value(v).row(0).to_owned()),
    })
}
