use crate::error::{config_err, Result};
use crate::losses::{KernelSpec, LossWeights};
use crate::pseudolabel::CentroidConfig;

/// Arithmetic width used for training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

/// Optimization and adaptation settings for both stages.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptConfig {
    /// Source-stage learning rate.
    pub lr: f64,
    /// Target-stage learning rate as a multiple of `lr`.
    pub target_lr_scale: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub source_epochs: usize,
    pub target_epochs: usize,
    pub weights: LossWeights,
    pub centroids: CentroidConfig,
    /// Neighbours consulted when relabeling hard samples.
    pub k: usize,
    pub kernel: KernelSpec,
    /// Square the feature term of the distillation loss.
    pub distill_squared: bool,
    /// Polynomial learning-rate decay `lr·(1 + 10·p)^(−0.75)` over training progress `p`.
    pub lr_decay: bool,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            target_lr_scale: 0.1,
            momentum: 0.9,
            weight_decay: 1e-3,
            batch_size: 32,
            source_epochs: 100,
            target_epochs: 100,
            weights: LossWeights::default(),
            centroids: CentroidConfig::default(),
            k: 5,
            kernel: KernelSpec::default(),
            distill_squared: false,
            lr_decay: false,
            seed: 0,
            precision: Precision::F32,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lr", self.lr),
            ("target_lr_scale", self.target_lr_scale),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("alpha", self.weights.alpha),
            ("beta", self.weights.beta),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return config_err(format!("{name} must be a finite value ≥ 0, got {v}"));
            }
        }
        if self.batch_size < 2 {
            return config_err("batch_size must be at least 2 (batch normalization)");
        }
        if !(0.0..=1.0).contains(&self.centroids.momentum) {
            return config_err("centroid momentum must lie in [0, 1]");
        }
        if self.k == 0 {
            return config_err("k must be at least 1");
        }
        self.kernel.validate()
    }

    /// Learning rate at `step` of `total` for a stage whose base rate is `base`.
    pub fn lr_at(&self, base: f64, step: usize, total: usize) -> f64 {
        if !self.lr_decay || total == 0 {
            return base;
        }
        let p = step as f64 / total as f64;
        base * (1.0 + 10.0 * p).powf(-0.75)
    }

    pub fn target_lr(&self) -> f64 {
        self.lr * self.target_lr_scale
    }

    pub(crate) fn sgd(&self) -> super::Sgd {
        super::Sgd {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}
