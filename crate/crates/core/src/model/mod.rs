//! Attention backbone, classifier and assistant domain module.

pub mod adm;
pub mod backbone;
pub mod state;

use rand::Rng;
use sfda_tensor::{BatchStats, Real, Tape, Tensor, Var};

pub use adm::{AdmConfig, BnMode};
pub use backbone::{Activation, BackboneConfig};
pub use state::{Bound, Buffer, Init, Param, ParamGroup, ParamSpec, ModelState};

use crate::error::{CoreError, Result};

/// How a forward pass treats the assistant branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardMode {
    /// `None` skips the assistant module entirely.
    pub adm: Option<BnMode>,
    /// Cut the gradient between the global attention map and the assistant
    /// module, so assistant losses train only the assistant parameters.
    pub detach_adm_input: bool,
}

impl ForwardMode {
    /// Backbone and classifier only.
    pub const BACKBONE: Self = Self {
        adm: None,
        detach_adm_input: false,
    };
    /// Source stage: batch statistics, assistant isolated from the backbone.
    pub const SOURCE: Self = Self {
        adm: Some(BnMode::Train),
        detach_adm_input: true,
    };
    /// Target stage and inference: running statistics, gradient flows through.
    pub const EVAL: Self = Self {
        adm: Some(BnMode::Eval),
        detach_adm_input: false,
    };
}

/// Tape handles produced by one forward pass over a batch.
pub struct ForwardOutputs<T> {
    pub layer_feats: Vec<Var>,
    /// Per-layer attention weights `[B·h, N+1, N+1]`.
    pub attn_probs: Vec<Var>,
    pub global_attn: Var,
    pub features: Var,
    pub logits: Var,
    pub adm_features: Option<Var>,
    pub adm_logits: Option<Var>,
    /// Assistant batch-norm statistics when run in training mode.
    pub bn_stats: Vec<BatchStats<T>>,
}

impl<T> ForwardOutputs<T> {
    /// Assistant `(features, logits)`; an error when the branch was skipped.
    pub fn adm(&self) -> Result<(Var, Var)> {
        match (self.adm_features, self.adm_logits) {
            (Some(f), Some(z)) => Ok((f, z)),
            _ => Err(CoreError::Invariant("forward pass ran without the assistant module".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub backbone: BackboneConfig,
    pub adm: AdmConfig,
    pub state: ModelState<T>,
}

impl<T: Real> Model<T> {
    /// Randomly initialized model; parameters are drawn in declaration order.
    pub fn new(backbone: BackboneConfig, adm: AdmConfig, rng: &mut impl Rng) -> Result<Self> {
        Self::check(&backbone, &adm)?;
        let specs = Self::param_specs(&backbone, &adm);
        let state = ModelState::init(&specs, adm.buffers(), rng)?;
        Ok(Self { backbone, adm, state })
    }

    /// Wraps existing state after checking it against the configured layout.
    pub fn from_state(backbone: BackboneConfig, adm: AdmConfig, state: ModelState<T>) -> Result<Self> {
        Self::check(&backbone, &adm)?;
        let specs = Self::param_specs(&backbone, &adm);
        if specs.len() != state.params().len() {
            return Err(CoreError::InvalidInput(format!(
                "state has {} parameters, layout expects {}",
                state.params().len(),
                specs.len()
            )));
        }
        for spec in &specs {
            match state.param(&spec.name) {
                Some(p) if p.value.shape() == spec.shape.as_slice() && p.group == spec.group => {}
                Some(p) => {
                    return Err(CoreError::InvalidInput(format!(
                        "parameter {} has shape {:?}, expected {:?}",
                        spec.name,
                        p.value.shape(),
                        spec.shape
                    )))
                }
                None => return Err(CoreError::InvalidInput(format!("missing parameter {}", spec.name))),
            }
        }
        for b in adm.buffers::<T>() {
            if state.buffer(&b.name).map(|t| t.shape() != b.value.shape()).unwrap_or(true) {
                return Err(CoreError::InvalidInput(format!("missing or misshapen buffer {}", b.name)));
            }
        }
        Ok(Self { backbone, adm, state })
    }

    fn check(backbone: &BackboneConfig, adm: &AdmConfig) -> Result<()> {
        backbone.validate()?;
        adm.validate()?;
        if adm.in_channels != backbone.embed_dim
            || adm.map_side != backbone.patches_per_side()
            || adm.feature_dim != backbone.feature_dim
            || adm.num_classes != backbone.num_classes
        {
            return Err(CoreError::Config(
                "assistant module does not match the backbone's width, map side, feature width or classes".into(),
            ));
        }
        Ok(())
    }

    pub fn param_specs(backbone: &BackboneConfig, adm: &AdmConfig) -> Vec<ParamSpec> {
        let mut specs = backbone.param_specs();
        specs.extend(adm.param_specs());
        specs
    }

    /// Assistant plan sized to `backbone` at desk scale.
    pub fn toy_adm(backbone: &BackboneConfig) -> AdmConfig {
        AdmConfig::toy(
            backbone.embed_dim,
            backbone.patches_per_side(),
            backbone.feature_dim,
            backbone.num_classes,
        )
    }

    /// `images: [B, C, H, W]`.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound<'_>,
        images: &Tensor<T>,
        mode: ForwardMode,
    ) -> Result<ForwardOutputs<T>> {
        let out = backbone::backbone_forward(tape, bound, &self.backbone, images)?;
        let mut outputs = ForwardOutputs {
            layer_feats: out.layer_feats,
            attn_probs: out.attn_probs,
            global_attn: out.global_attn,
            features: out.features,
            logits: out.logits,
            adm_features: None,
            adm_logits: None,
            bn_stats: Vec::new(),
        };
        if let Some(bn) = mode.adm {
            let src = if mode.detach_adm_input {
                tape.detach(out.global_attn)
            } else {
                out.global_attn
            };
            let map = adm::reshape_attention(tape, src)?;
            let a = adm::adm_forward(tape, bound, &self.state, &self.adm, map, bn)?;
            outputs.adm_features = Some(a.features);
            outputs.adm_logits = Some(a.logits);
            outputs.bn_stats = a.batch_stats;
        }
        Ok(outputs)
    }

    /// Folds training-mode batch statistics into the running estimates:
    /// `running ← (1 − m)·running + m·batch`.
    pub fn update_running_stats(&mut self, stats: &[BatchStats<T>]) -> Result<()> {
        if stats.is_empty() {
            return Ok(());
        }
        if stats.len() != self.adm.convs.len() {
            return Err(CoreError::Invariant(format!(
                "{} batch-norm statistics for {} blocks",
                stats.len(),
                self.adm.convs.len()
            )));
        }
        let m = T::lit(adm::BN_MOMENTUM);
        let keep = T::one() - m;
        for (i, s) in stats.iter().enumerate() {
            for (name, batch) in [(adm::running_mean(i), &s.mean), (adm::running_var(i), &s.var)] {
                let run = self
                    .state
                    .buffer_mut(&name)
                    .ok_or_else(|| CoreError::Invariant(format!("missing buffer {name}")))?;
                for (r, &b) in run.data_mut().iter_mut().zip(batch.iter()) {
                    *r = keep * *r + m * b;
                }
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            backbone: self.backbone.clone(),
            adm: self.adm.clone(),
            state: self.state.cast(),
        }
    }
}
