//! Patch-token attention encoder.
//!
//! Images are cut into square patches, linearly embedded, prefixed with a
//! learned class token and offset by learned positional embeddings. A stack
//! of pre-norm multi-head self-attention blocks follows; the output of each
//! block's attention sub-layer (after the head-concatenating projection,
//! before the residual MLP) is kept as that layer's attention feature. The
//! final class token goes through a feature head and the linear classifier.

use sfda_tensor::{Real, Tape, Tensor, Var};

use super::state::{Init, ParamGroup, ParamSpec};
use super::Bound;
use crate::error::{config_err, Result};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub image_side: usize,
    pub patch_side: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_hidden: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    /// First layer (1-based) whose attention feature enters the EMA.
    pub attn_start: usize,
    pub ema_lambda: f64,
    /// Weight the running average by `λ` and the current layer by `1 − λ`
    /// instead of the other way round.
    pub ema_swap: bool,
    pub activation: Activation,
}

/// Nonlinearity of the encoder MLPs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::toy(4)
    }
}

impl BackboneConfig {
    pub fn toy(num_classes: usize) -> Self {
        let layers = 6;
        Self {
            in_channels: 1,
            image_side: 16,
            patch_side: 4,
            embed_dim: 32,
            heads: 4,
            layers,
            mlp_hidden: 64,
            feature_dim: 32,
            num_classes,
            attn_start: layers / 2 + 1,
            ema_lambda: 0.99,
            ema_swap: false,
            activation: Activation::Relu,
        }
    }

    /// ViT-B/16 at 224 pixels with a 256-wide feature head.
    pub fn full_scale(num_classes: usize) -> Self {
        Self {
            in_channels: 3,
            image_side: 224,
            patch_side: 16,
            embed_dim: 768,
            heads: 12,
            layers: 12,
            mlp_hidden: 3072,
            feature_dim: 256,
            num_classes,
            attn_start: 5,
            ema_lambda: 0.99,
            ema_swap: false,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_side == 0 || !self.image_side.is_multiple_of(self.patch_side) {
            return config_err(format!(
                "image_side {} not divisible by patch_side {}",
                self.image_side, self.patch_side
            ));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return config_err(format!("embed_dim {} not divisible by heads {}", self.embed_dim, self.heads));
        }
        if self.attn_start == 0 || self.attn_start > self.layers {
            return config_err(format!(
                "attention aggregation window {}..={} is empty",
                self.attn_start, self.layers
            ));
        }
        if !(0.0..=1.0).contains(&self.ema_lambda) {
            return config_err(format!("ema_lambda {} outside [0, 1]", self.ema_lambda));
        }
        if self.num_classes == 0 || self.feature_dim == 0 || self.in_channels == 0 {
            return config_err("num_classes, feature_dim and in_channels must be positive");
        }
        Ok(())
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_side / self.patch_side
    }

    /// Patch count `N`.
    pub fn num_patches(&self) -> usize {
        self.patches_per_side().pow(2)
    }

    /// Sequence length `N + 1` including the class token.
    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.patch_side * self.patch_side
    }

    /// Parameters of the feature extractor followed by the classifier.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        use ParamGroup::{Backbone as B, Classifier as C};
        let (d, hm, f) = (self.embed_dim, self.mlp_hidden, self.feature_dim);
        let mut v = vec![
            ParamSpec::new("patch.w", B, &[self.patch_len(), d], Init::FanIn(self.patch_len())),
            ParamSpec::new("patch.b", B, &[d], Init::Constant(0.0)),
            ParamSpec::new("cls", B, &[1, d], Init::Normal(0.02)),
            ParamSpec::new("pos", B, &[self.tokens(), d], Init::Normal(0.5)),
        ];
        for l in 0..self.layers {
            let p = |s: &str| format!("blocks.{l}.{s}");
            v.push(ParamSpec::new(p("ln1.g"), B, &[d], Init::Constant(1.0)));
            v.push(ParamSpec::new(p("ln1.b"), B, &[d], Init::Constant(0.0)));
            for proj in ["q", "k", "v", "o"] {
                v.push(ParamSpec::new(p(&format!("attn.{proj}.w")), B, &[d, d], Init::FanIn(d)));
                v.push(ParamSpec::new(p(&format!("attn.{proj}.b")), B, &[d], Init::Constant(0.0)));
            }
            v.push(ParamSpec::new(p("ln2.g"), B, &[d], Init::Constant(1.0)));
            v.push(ParamSpec::new(p("ln2.b"), B, &[d], Init::Constant(0.0)));
            v.push(ParamSpec::new(p("mlp.fc1.w"), B, &[d, hm], Init::FanIn(d)));
            v.push(ParamSpec::new(p("mlp.fc1.b"), B, &[hm], Init::Constant(0.0)));
            v.push(ParamSpec::new(p("mlp.fc2.w"), B, &[hm, d], Init::FanIn(hm)));
            v.push(ParamSpec::new(p("mlp.fc2.b"), B, &[d], Init::Constant(0.0)));
        }
        v.push(ParamSpec::new("norm.g", B, &[d], Init::Constant(1.0)));
        v.push(ParamSpec::new("norm.b", B, &[d], Init::Constant(0.0)));
        v.push(ParamSpec::new("head.w", B, &[d, f], Init::FanIn(d)));
        v.push(ParamSpec::new("head.b", B, &[f], Init::Constant(0.0)));
        v.push(ParamSpec::new("classifier.w", C, &[f, self.num_classes], Init::FanIn(f)));
        v.push(ParamSpec::new("classifier.b", C, &[self.num_classes], Init::Constant(0.0)));
        v
    }

    /// Rearranges `[B, C, H, W]` images into `[B·N, C·p·p]` patch rows
    /// (patches row-major over the grid, pixels channel-major within a patch).
    pub fn patchify<T: Real>(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let s = images.shape();
        if s.len() != 4 || s[1] != self.in_channels || s[2] != self.image_side || s[3] != self.image_side {
            return config_err(format!(
                "images of shape {s:?} do not match [B, {}, {}, {}]",
                self.in_channels, self.image_side, self.image_side
            ));
        }
        let (b, c, side, p, g) = (s[0], s[1], self.image_side, self.patch_side, self.patches_per_side());
        let mut out = Vec::with_capacity(images.len());
        let src = images.data();
        for bi in 0..b {
            for gi in 0..g {
                for gj in 0..g {
                    for ci in 0..c {
                        for pi in 0..p {
                            let row = gi * p + pi;
                            let base = ((bi * c + ci) * side + row) * side + gj * p;
                            out.extend_from_slice(&src[base..base + p]);
                        }
                    }
                }
            }
        }
        Ok(Tensor::new([b * g * g, self.patch_len()], out)?)
    }
}

/// Tape handles produced by one attention block.
pub struct BlockOutput {
    pub tokens: Var,
    /// Concatenated multi-head attention output after the output projection, `[B, N+1, D]`.
    pub attn_feat: Var,
    /// Attention weights `[B·heads, N+1, N+1]`, row-stochastic.
    pub attn_probs: Var,
}

/// One pre-norm transformer block over `tokens: [B, N+1, D]`.
pub fn mhsa_layer<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound<'_>,
    cfg: &BackboneConfig,
    layer: usize,
    tokens: Var,
) -> Result<BlockOutput> {
    let shape = tape.shape(tokens).to_vec();
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    if d != cfg.embed_dim {
        return config_err(format!("token width {d} != embed_dim {}", cfg.embed_dim));
    }
    let (h, dh) = (cfg.heads, cfg.head_dim());
    let p = |s: &str| bound.p(&format!("blocks.{layer}.{s}"));

    let normed = tape.layer_norm(tokens, p("ln1.g"), p("ln1.b"), LN_EPS)?;
    let flat = tape.reshape(normed, &[b * t, d])?;
    let heads = |tape: &mut Tape<T>, proj: &str| -> Result<Var> {
        let y = tape.linear(flat, p(&format!("attn.{proj}.w")), p(&format!("attn.{proj}.b")))?;
        let y = tape.reshape(y, &[b, t, h, dh])?;
        let y = tape.permute(y, &[0, 2, 1, 3])?;
        Ok(tape.reshape(y, &[b * h, t, dh])?)
    };
    let q = heads(tape, "q")?;
    let k = heads(tape, "k")?;
    let v = heads(tape, "v")?;

    let scores = tape.bmm(q, k, true)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let probs = tape.softmax(scores, 2)?;
    let ctx = tape.bmm(probs, v, false)?;
    let ctx = tape.reshape(ctx, &[b, h, t, dh])?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[b * t, d])?;
    let attn = tape.linear(ctx, p("attn.o.w"), p("attn.o.b"))?;
    let attn_feat = tape.reshape(attn, &[b, t, d])?;

    let x = tape.add(tokens, attn_feat)?;
    let normed = tape.layer_norm(x, p("ln2.g"), p("ln2.b"), LN_EPS)?;
    let flat = tape.reshape(normed, &[b * t, d])?;
    let hid = tape.linear(flat, p("mlp.fc1.w"), p("mlp.fc1.b"))?;
    let hid = match cfg.activation {
        Activation::Relu => tape.relu(hid),
        Activation::Gelu => tape.gelu(hid),
    };
    let mlp = tape.linear(hid, p("mlp.fc2.w"), p("mlp.fc2.b"))?;
    let mlp = tape.reshape(mlp, &[b, t, d])?;
    let out = tape.add(x, mlp)?;
    Ok(BlockOutput {
        tokens: out,
        attn_feat,
        attn_probs: probs,
    })
}

/// Exponential moving average over layers `start..=L` (1-based).
///
/// The accumulator starts at layer `start`; each later layer `l` updates it
/// as `λ·feat_l + (1 − λ)·acc`. With `swap`, the roles of `λ` and `1 − λ`
/// are exchanged.
pub fn ema_aggregate<T: Real>(
    tape: &mut Tape<T>,
    layer_feats: &[Var],
    start: usize,
    lambda: f64,
    swap: bool,
) -> Result<Var> {
    if start == 0 || start > layer_feats.len() {
        return config_err(format!(
            "attention aggregation window {start}..={} is empty",
            layer_feats.len()
        ));
    }
    let (w_cur, w_acc) = if swap { (1.0 - lambda, lambda) } else { (lambda, 1.0 - lambda) };
    let mut acc = layer_feats[start - 1];
    for &feat in &layer_feats[start..] {
        let cur = tape.scale(feat, w_cur);
        let prev = tape.scale(acc, w_acc);
        acc = tape.add(cur, prev)?;
    }
    Ok(acc)
}

/// Backbone handles for one batch.
pub struct BackboneOutput {
    pub layer_feats: Vec<Var>,
    pub attn_probs: Vec<Var>,
    /// EMA-aggregated attention map `[B, N+1, D]`.
    pub global_attn: Var,
    /// `[B, F]`.
    pub features: Var,
    /// `[B, C]`.
    pub logits: Var,
}

pub fn backbone_forward<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound<'_>,
    cfg: &BackboneConfig,
    images: &Tensor<T>,
) -> Result<BackboneOutput> {
    let b = images.shape().first().copied().unwrap_or(0);
    let (n, t, d) = (cfg.num_patches(), cfg.tokens(), cfg.embed_dim);
    let patches = tape.constant(cfg.patchify(images)?);
    let emb = tape.linear(patches, bound.p("patch.w"), bound.p("patch.b"))?;
    let emb = tape.reshape(emb, &[b, n, d])?;
    let cls = tape.gather_rows(bound.p("cls"), &vec![0; b])?;
    let cls = tape.reshape(cls, &[b, 1, d])?;
    let x = tape.concat(&[cls, emb], 1)?;
    let mut x = tape.add_bcast(x, bound.p("pos"))?;

    let mut layer_feats = Vec::with_capacity(cfg.layers);
    let mut attn_probs = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let out = mhsa_layer(tape, bound, cfg, l, x)?;
        layer_feats.push(out.attn_feat);
        attn_probs.push(out.attn_probs);
        x = out.tokens;
    }
    let global_attn = ema_aggregate(tape, &layer_feats, cfg.attn_start, cfg.ema_lambda, cfg.ema_swap)?;

    let x = tape.layer_norm(x, bound.p("norm.g"), bound.p("norm.b"), LN_EPS)?;
    let flat = tape.reshape(x, &[b * t, d])?;
    let cls_rows: Vec<usize> = (0..b).map(|i| i * t).collect();
    let cls_out = tape.gather_rows(flat, &cls_rows)?;
    let features = tape.linear(cls_out, bound.p("head.w"), bound.p("head.b"))?;
    let logits = tape.linear(features, bound.p("classifier.w"), bound.p("classifier.b"))?;
    Ok(BackboneOutput {
        layer_feats,
        attn_probs,
        global_attn,
        features,
        logits,
    })
}
