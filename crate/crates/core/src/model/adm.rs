//! Assistant domain module.
//!
//! The aggregated attention map is reshaped into a channel-major image
//! (one channel per embedding dimension, class token dropped) and passed
//! through three convolution blocks: conv → batch norm → ReLU twice, then
//! conv → batch norm → global average pooling. The pooled vector (projected
//! to the feature width when the last block is narrower) is the assistant
//! feature; a Linear → ReLU → Linear head maps it to assistant logits.

use sfda_tensor::{BatchStats, ConvGeom, NormMode, Real, Tape, Var};

use super::state::{Buffer, Init, ParamGroup, ParamSpec};
use super::Bound;
use crate::error::{config_err, Result};

pub const BN_EPS: f64 = 1e-5;
/// Weight of the newest batch in a running-statistic update.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmConfig {
    /// Channels of the reshaped attention map (the embedding width).
    pub in_channels: usize,
    /// Side of the reshaped attention map (`√N`).
    pub map_side: usize,
    pub convs: Vec<ConvSpec>,
    pub feature_dim: usize,
    pub head_hidden: usize,
    pub num_classes: usize,
}

impl AdmConfig {
    /// Desk-scale plan: 3×3 convolutions with padding 1, the last one strided.
    pub fn toy(in_channels: usize, map_side: usize, feature_dim: usize, num_classes: usize) -> Self {
        let conv = |out_channels, stride| ConvSpec {
            out_channels,
            kernel: 3,
            stride,
            padding: 1,
        };
        Self {
            in_channels,
            map_side,
            convs: vec![conv(8, 1), conv(8, 1), conv(8, 2)],
            feature_dim,
            head_hidden: 16,
            num_classes,
        }
    }

    /// 768×14×14 → 512×6×6 → 256×4×4 → 256×2×2, unpadded 3×3 convolutions.
    pub fn full_scale(num_classes: usize) -> Self {
        let conv = |out_channels, stride| ConvSpec {
            out_channels,
            kernel: 3,
            stride,
            padding: 0,
        };
        Self {
            in_channels: 768,
            map_side: 14,
            convs: vec![conv(512, 2), conv(256, 1), conv(256, 1)],
            feature_dim: 256,
            head_hidden: 256,
            num_classes,
        }
    }

    /// `(channels, side)` after every convolution.
    pub fn stage_shapes(&self) -> Result<Vec<(usize, usize)>> {
        let mut side = self.map_side;
        let mut out = Vec::with_capacity(self.convs.len());
        for (i, c) in self.convs.iter().enumerate() {
            side = match ConvGeom::out_extent(side, c.kernel, c.stride, c.padding) {
                Some(s) if s >= 1 => s,
                _ => return config_err(format!("assistant conv {i} leaves no spatial extent")),
            };
            out.push((c.out_channels, side));
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.convs.len() != 3 {
            return config_err(format!("assistant module needs 3 conv blocks, got {}", self.convs.len()));
        }
        self.stage_shapes()?;
        if self.feature_dim == 0 || self.head_hidden == 0 || self.num_classes == 0 {
            return config_err("assistant widths must be positive");
        }
        Ok(())
    }

    pub fn pooled_dim(&self) -> usize {
        self.convs.last().map_or(self.in_channels, |c| c.out_channels)
    }

    /// Whether a linear projection maps the pooled vector to `feature_dim`.
    pub fn projects(&self) -> bool {
        self.pooled_dim() != self.feature_dim
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        use ParamGroup::Adm as G;
        let mut v = Vec::new();
        let mut cin = self.in_channels;
        for (i, c) in self.convs.iter().enumerate() {
            let fan_in = cin * c.kernel * c.kernel;
            v.push(ParamSpec::new(
                format!("adm.conv{i}.w"),
                G,
                &[c.out_channels, cin, c.kernel, c.kernel],
                Init::FanIn(fan_in),
            ));
            v.push(ParamSpec::new(format!("adm.conv{i}.b"), G, &[c.out_channels], Init::Constant(0.0)));
            v.push(ParamSpec::new(format!("adm.bn{i}.g"), G, &[c.out_channels], Init::Constant(1.0)));
            v.push(ParamSpec::new(format!("adm.bn{i}.b"), G, &[c.out_channels], Init::Constant(0.0)));
            cin = c.out_channels;
        }
        let f = self.feature_dim;
        if self.projects() {
            v.push(ParamSpec::new("adm.proj.w", G, &[cin, f], Init::FanIn(cin)));
            v.push(ParamSpec::new("adm.proj.b", G, &[f], Init::Constant(0.0)));
        }
        v.push(ParamSpec::new("adm.fc1.w", G, &[f, self.head_hidden], Init::FanIn(f)));
        v.push(ParamSpec::new("adm.fc1.b", G, &[self.head_hidden], Init::Constant(0.0)));
        v.push(ParamSpec::new("adm.fc2.w", G, &[self.head_hidden, self.num_classes], Init::FanIn(self.head_hidden)));
        v.push(ParamSpec::new("adm.fc2.b", G, &[self.num_classes], Init::Constant(0.0)));
        v
    }

    /// Batch-norm running statistics, initialized to mean 0 and variance 1.
    pub fn buffers<T: Real>(&self) -> Vec<Buffer<T>> {
        let mut v = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            v.push(Buffer {
                name: running_mean(i),
                value: sfda_tensor::Tensor::zeros([c.out_channels]),
            });
            v.push(Buffer {
                name: running_var(i),
                value: sfda_tensor::Tensor::full([c.out_channels], T::one()),
            });
        }
        v
    }
}

pub fn running_mean(block: usize) -> String {
    format!("adm.bn{block}.running_mean")
}

pub fn running_var(block: usize) -> String {
    format!("adm.bn{block}.running_var")
}

/// Drops the class token of `x̂_a: [B, N+1, D]` and lays the remaining `N`
/// tokens out row-major as a `[B, D, √N, √N]` map.
pub fn reshape_attention<T: Real>(tape: &mut Tape<T>, global_attn: Var) -> Result<Var> {
    let s = tape.shape(global_attn).to_vec();
    if s.len() != 3 || s[1] < 2 {
        return config_err(format!("attention map of shape {s:?} has no patch tokens"));
    }
    let (b, t, d) = (s[0], s[1], s[2]);
    let n = t - 1;
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n {
        return config_err(format!("{n} patch tokens do not form a square map"));
    }
    let flat = tape.reshape(global_attn, &[b * t, d])?;
    let rows: Vec<usize> = (0..b).flat_map(|bi| (1..t).map(move |ti| bi * t + ti)).collect();
    let patches = tape.gather_rows(flat, &rows)?;
    let patches = tape.reshape(patches, &[b, n, d])?;
    let chan = tape.permute(patches, &[0, 2, 1])?;
    Ok(tape.reshape(chan, &[b, d, side, side])?)
}

/// Batch-norm statistics mode for the assistant module.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

pub struct AdmOutput<T> {
    /// `[B, F]`.
    pub features: Var,
    /// `[B, C]`.
    pub logits: Var,
    /// Training-mode batch statistics per block, for running-stat updates.
    pub batch_stats: Vec<BatchStats<T>>,
}

pub fn adm_forward<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound<'_>,
    state: &super::ModelState<T>,
    cfg: &AdmConfig,
    map: Var,
    mode: BnMode,
) -> Result<AdmOutput<T>> {
    let s = tape.shape(map).to_vec();
    if s.len() != 4 || s[1] != cfg.in_channels || s[2] != cfg.map_side || s[3] != cfg.map_side {
        return config_err(format!(
            "assistant input {s:?} does not match [B, {}, {}, {}]",
            cfg.in_channels, cfg.map_side, cfg.map_side
        ));
    }
    let b = s[0];
    let mut x = map;
    let mut batch_stats = Vec::new();
    let last = cfg.convs.len() - 1;
    for (i, c) in cfg.convs.iter().enumerate() {
        let w = bound.p(&format!("adm.conv{i}.w"));
        let bias = bound.p(&format!("adm.conv{i}.b"));
        x = tape.conv2d(x, w, Some(bias), c.stride, c.padding)?;
        let (g, beta) = (bound.p(&format!("adm.bn{i}.g")), bound.p(&format!("adm.bn{i}.b")));
        let (y, stats) = match mode {
            BnMode::Train => tape.batch_norm(x, g, beta, BN_EPS, NormMode::Train)?,
            BnMode::Eval => {
                let mean = state.buffer(&running_mean(i)).expect("running mean buffer");
                let var = state.buffer(&running_var(i)).expect("running var buffer");
                tape.batch_norm(
                    x,
                    g,
                    beta,
                    BN_EPS,
                    NormMode::Eval {
                        mean: mean.data(),
                        var: var.data(),
                    },
                )?
            }
        };
        batch_stats.extend(stats);
        x = if i < last { tape.relu(y) } else { y };
    }
    let side = tape.shape(x)[2];
    let pooled = tape.avg_pool2d(x, side, 1)?;
    let mut features = tape.reshape(pooled, &[b, cfg.pooled_dim()])?;
    if cfg.projects() {
        features = tape.linear(features, bound.p("adm.proj.w"), bound.p("adm.proj.b"))?;
    }
    let h = tape.linear(features, bound.p("adm.fc1.w"), bound.p("adm.fc1.b"))?;
    let h = tape.relu(h);
    let logits = tape.linear(h, bound.p("adm.fc2.w"), bound.p("adm.fc2.b"))?;
    Ok(AdmOutput {
        features,
        logits,
        batch_stats,
    })
}

/// Self-distillation loss of the assistant head against the main branch.
///
/// Mean over the batch of `‖f̂ − f‖₂ + KL(softmax(ẑ) ‖ softmax(z))`. The
/// teacher side (`f`, `z`) is detached, so no gradient reaches the main
/// branch through it. `squared` switches the feature term to `‖f̂ − f‖₂²`.
pub fn distill_loss<T: Real>(
    tape: &mut Tape<T>,
    adm_features: Var,
    features: Var,
    adm_logits: Var,
    logits: Var,
    squared: bool,
) -> Result<Var> {
    let teacher_f = tape.detach(features);
    let teacher_z = tape.detach(logits);
    let diff = tape.sub(adm_features, teacher_f)?;
    let feat_term = if squared {
        let sq = tape.mul(diff, diff)?;
        tape.sum_axis(sq, 1)?
    } else {
        tape.row_norm(diff)?
    };
    let log_p = tape.log_softmax(adm_logits, 1)?;
    let log_q = tape.log_softmax(teacher_z, 1)?;
    let p = tape.softmax(adm_logits, 1)?;
    let log_ratio = tape.sub(log_p, log_q)?;
    let kl = tape.mul(p, log_ratio)?;
    let kl = tape.sum_axis(kl, 1)?;
    let per_sample = tape.add(feat_term, kl)?;
    Ok(tape.mean(per_sample))
}
