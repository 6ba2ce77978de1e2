//! Finite-difference check of every training loss on a toy model in `f64`.
//!
//! Each loss is checked with respect to the parameters it trains: the
//! distillation loss against assistant parameters (its teacher and the
//! assistant's input are detached), the target losses against backbone
//! parameters (classifier and assistant are frozen in that stage).
//!
//! Coordinates whose difference stencil crosses a ReLU kink are replaced by
//! fresh draws, since no derivative exists at that scale there.
//!
//! The MMD bandwidth is a stop-gradient by design. The check therefore fixes
//! it at the median-heuristic value of the unperturbed batch, which is the
//! function whose gradient the tape computes.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sfda_tensor::gradcheck::{check_gradients_smooth, GradCheckReport};
use sfda_tensor::{Tape, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::losses::{self, KernelSpec, LossWeights};
use crate::model::adm::distill_loss;
use crate::model::{BackboneConfig, ForwardMode, Model, ParamGroup};
use crate::synthdata::{generate, DomainSpec};

/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteConfig {
    pub seed: u64,
    /// Parameter coordinates sampled per loss.
    pub coords: usize,
    /// Central-difference step.
    pub h: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            coords: 24,
            h: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossCheck {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl LossCheck {
    pub fn passes(&self, want: usize) -> bool {
        self.passes_within(want, TOLERANCE)
    }

    pub fn passes_within(&self, want: usize, tol: f64) -> bool {
        self.report.checked >= want && self.report.passes(tol)
    }
}

/// Three samples per class: two easy, one hard.
const PER_CLASS: usize = 3;

struct Fixture {
    model: Model<f64>,
    images: Tensor<f64>,
    labels: Vec<usize>,
    easy: Vec<bool>,
    kernel: KernelSpec,
}

fn fixture(seed: u64) -> Result<Fixture> {
    let spec = DomainSpec {
        per_class: PER_CLASS,
        seed,
        ..DomainSpec::default()
    };
    let (_, target) = generate(&spec)?;
    let bb = BackboneConfig::toy(spec.num_classes);
    let adm = Model::<f64>::toy_adm(&bb);
    let model = Model::new(bb, adm, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let labels = target.sidecar.truth.clone();
    // The first two members of each class are easy, the rest hard.
    let mut seen = vec![0usize; spec.num_classes];
    let easy = labels
        .iter()
        .map(|&y| {
            seen[y] += 1;
            seen[y] <= 2
        })
        .collect();
    let images: Tensor<f64> = target.images.cast();

    let mut tape = Tape::new();
    let bound = model.state.bind(&mut tape);
    let out = model.forward(&mut tape, &bound, &images, ForwardMode::BACKBONE)?;
    let f = tape.value(out.features).clone();
    let kernel = KernelSpec {
        bandwidth: Some(median_distance(&f)),
        ..KernelSpec::default()
    };
    Ok(Fixture {
        model,
        images,
        labels,
        easy,
        kernel,
    })
}

/// Square root of the median pairwise squared distance between rows.
fn median_distance(f: &Tensor<f64>) -> f64 {
    let n = f.shape()[0];
    let mut d: Vec<f64> = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            d.push(f.row(i).iter().zip(f.row(j)).map(|(a, b)| (a - b) * (a - b)).sum());
        }
    }
    d.sort_by(f64::total_cmp);
    let h = d.len() / 2;
    let m = if d.len() % 2 == 1 { d[h] } else { 0.5 * (d[h - 1] + d[h]) };
    m.sqrt()
}

/// Every `(param, element)` coordinate of `group` in random order.
fn coordinates(model: &Model<f64>, group: ParamGroup, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let flat: Vec<(usize, usize)> = model
        .state
        .params()
        .iter()
        .enumerate()
        .filter(|(_, p)| p.group == group)
        .flat_map(|(i, p)| (0..p.value.len()).map(move |j| (i, j)))
        .collect();
    sample(rng, flat.len(), flat.len()).into_iter().map(|k| flat[k]).collect()
}

#[derive(Clone, Copy)]
enum Loss {
    Distill,
    Im,
    Cst,
    Cmk,
    Total,
}

impl Loss {
    fn name(self) -> &'static str {
        match self {
            Loss::Distill => "L_kd",
            Loss::Im => "L_im",
            Loss::Cst => "L_cst",
            Loss::Cmk => "L_cmk",
            Loss::Total => "L_total",
        }
    }
}

fn evaluate(fx: &Fixture, loss: Loss, tape: &mut Tape<f64>, vars: &[Var]) -> Result<Var> {
    let bound = fx.model.state.bind_vars(vars.to_vec())?;
    let mode = match loss {
        Loss::Distill => ForwardMode::SOURCE,
        _ => ForwardMode::EVAL,
    };
    let out = fx.model.forward(tape, &bound, &fx.images, mode)?;
    let (fa, za) = out.adm()?;
    let cmk = |tape: &mut Tape<f64>| -> Result<Var> {
        let m = losses::cmk_mmd_batch(tape, out.features, &fx.easy, &fx.labels, &fx.kernel)?;
        if m.skipped {
            return Err(CoreError::Invariant("gradient fixture shares no class between banks".into()));
        }
        Ok(m.value)
    };
    match loss {
        Loss::Distill => distill_loss(tape, fa, out.features, za, out.logits, false),
        Loss::Im => losses::im_loss(tape, out.logits),
        Loss::Cst => losses::cst_loss(tape, out.logits, za, &fx.labels),
        Loss::Cmk => cmk(tape),
        Loss::Total => {
            let im = losses::im_loss(tape, out.logits)?;
            let cst = losses::cst_loss(tape, out.logits, za, &fx.labels)?;
            let mmd = cmk(tape)?;
            losses::total_loss(tape, im, cst, mmd, LossWeights::default())
        }
    }
}

/// Runs the check for every loss.
pub fn run(cfg: &SuiteConfig) -> Result<Vec<LossCheck>> {
    let fx = fixture(cfg.seed)?;
    let inputs: Vec<Tensor<f64>> = fx.model.state.params().iter().map(|p| p.value.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6772_6164);
    let mut out = Vec::new();
    for loss in [Loss::Distill, Loss::Im, Loss::Cst, Loss::Cmk, Loss::Total] {
        let group = match loss {
            Loss::Distill => ParamGroup::Adm,
            _ => ParamGroup::Backbone,
        };
        let coords = coordinates(&fx.model, group, &mut rng);
        let f = |tape: &mut Tape<f64>, vars: &[Var]| -> sfda_tensor::Result<Var> {
            evaluate(&fx, loss, tape, vars).map_err(|e| match e {
                CoreError::Tensor(t) => t,
                other => sfda_tensor::TensorError::Invalid {
                    op: "gradient suite",
                    msg: other.to_string(),
                },
            })
        };
        let report = check_gradients_smooth(&inputs, f, cfg.h, coords, cfg.coords)?;
        log::info!(
            "{}: {} coordinates ({} skipped at ReLU kinks), max relative error {:.3e}",
            loss.name(),
            report.checked,
            report.skipped,
            report.max_rel_err
        );
        out.push(LossCheck {
            name: loss.name(),
            report,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_distance_of_three_points() {
        // Squared distances 1, 4, 9 → median 4 → σ = 2.
        let f = Tensor::new([3, 1], vec![0.0, 1.0, 3.0]).unwrap();
        assert_eq!(median_distance(&f), 2.0);
    }
}
