//! Two-stage training: supervised source training with assistant
//! distillation, then source-free adaptation of the backbone on the target.

mod config;
mod sgd;

pub use config::{AdaptConfig, Precision};
pub use sgd::Sgd;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sfda_tensor::{Real, Tape, Tensor};

use crate::consistency::{self, MemoryBank};
use crate::error::{CoreError, Result};
use crate::io::metrics::MetricsRow;
use crate::losses;
use crate::model::adm::distill_loss;
use crate::model::{ForwardMode, Model, ParamGroup};
use crate::pseudolabel::{self, accuracy, Space};

/// Images per forward pass when no gradient is needed.
pub const EVAL_BATCH: usize = 100;

/// Shuffled mini-batches of `0..n`. A trailing batch of one sample is merged
/// into its predecessor so every batch has at least two samples.
pub fn batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let tail = out.pop().expect("non-empty");
        out.last_mut().expect("predecessor").extend(tail);
    }
    out
}

/// Generator for epoch `epoch` of `stage`, independent of every other epoch.
fn epoch_rng(seed: u64, stage: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stage << 32) | epoch as u64);
    rng
}

fn batch_images<T: Real>(images: &Tensor<f32>, idx: &[usize]) -> Result<Tensor<T>> {
    Ok(images.select_rows(idx)?.cast())
}

fn count(images: &Tensor<f32>) -> Result<usize> {
    match images.shape() {
        [n, _, _, _] if *n > 0 => Ok(*n),
        [0, ..] => Err(CoreError::EmptyInput("dataset has no images".into())),
        s => Err(CoreError::InvalidInput(format!("images must be [n, C, H, W], got {s:?}"))),
    }
}

/// Row-wise argmax, ties to the smallest index.
pub fn argmax_rows<T: Real>(t: &Tensor<T>) -> Vec<usize> {
    t.rows()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourceEpoch {
    pub epoch: usize,
    pub ce: f64,
    pub distill: f64,
}

/// Stage 1: cross-entropy on the classifier plus assistant distillation.
///
/// The assistant reads a detached copy of the attention map and its teacher
/// targets are detached, so the distillation term trains only the assistant.
pub fn train_source<T: Real>(
    model: &mut Model<T>,
    images: &Tensor<f32>,
    labels: &[usize],
    cfg: &AdaptConfig,
) -> Result<Vec<SourceEpoch>> {
    cfg.validate()?;
    let n = count(images)?;
    if labels.len() != n {
        return Err(CoreError::InvalidInput(format!("{} labels for {n} images", labels.len())));
    }
    for g in [ParamGroup::Backbone, ParamGroup::Classifier, ParamGroup::Adm] {
        model.state.set_frozen(g, false);
    }
    let sgd = cfg.sgd();
    let per_epoch = n.div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.source_epochs;
    let mut step = 0;
    let mut history = Vec::with_capacity(cfg.source_epochs);
    for epoch in 1..=cfg.source_epochs {
        let (mut ce_sum, mut kd_sum, mut seen) = (0.0, 0.0, 0usize);
        for idx in batches(n, cfg.batch_size, &mut epoch_rng(cfg.seed, 1, epoch)) {
            let x = batch_images::<T>(images, &idx)?;
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let (grads, vars, stats, ce, kd) = {
                let bound = model.state.bind(&mut tape);
                let out = model.forward(&mut tape, &bound, &x, ForwardMode::SOURCE)?;
                let (fa, za) = out.adm()?;
                let ce = losses::ce_loss(&mut tape, out.logits, &y)?;
                let kd = distill_loss(&mut tape, fa, out.features, za, out.logits, cfg.distill_squared)?;
                let loss = tape.add(ce, kd)?;
                let grads = tape.backward(loss)?;
                let (ce, kd) = (tape.value(ce).item().to_f64_lossy(), tape.value(kd).item().to_f64_lossy());
                (grads, bound.vars().to_vec(), out.bn_stats, ce, kd)
            };
            sgd.step(&mut model.state, &vars, &grads, cfg.lr_at(cfg.lr, step, total))?;
            model.update_running_stats(&stats)?;
            step += 1;
            ce_sum += ce * idx.len() as f64;
            kd_sum += kd * idx.len() as f64;
            seen += idx.len();
        }
        let e = SourceEpoch {
            epoch,
            ce: ce_sum / seen as f64,
            distill: kd_sum / seen as f64,
        };
        log::info!("source epoch {epoch}: ce {:.4} distill {:.4}", e.ce, e.distill);
        history.push(e);
    }
    Ok(history)
}

/// Full-set outputs of an inference pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Extracted<T> {
    pub features: Tensor<T>,
    pub logits: Tensor<T>,
    pub adm_features: Tensor<T>,
    pub adm_logits: Tensor<T>,
}

/// Inference over every image with assistant batch norm in running-statistics mode.
pub fn extract<T: Real>(model: &Model<T>, images: &Tensor<f32>) -> Result<Extracted<T>> {
    let n = count(images)?;
    let mut parts: [Vec<T>; 4] = Default::default();
    let mut widths = [0usize; 4];
    let order: Vec<usize> = (0..n).collect();
    for idx in order.chunks(EVAL_BATCH) {
        let x = batch_images::<T>(images, idx)?;
        let mut tape = Tape::new();
        let bound = model.state.bind(&mut tape);
        let out = model.forward(&mut tape, &bound, &x, ForwardMode::EVAL)?;
        let (fa, za) = out.adm()?;
        for (k, v) in [out.features, out.logits, fa, za].into_iter().enumerate() {
            let t = tape.value(v);
            widths[k] = t.shape()[1];
            parts[k].extend_from_slice(t.data());
        }
    }
    let [f, z, fa, za] = parts;
    Ok(Extracted {
        features: Tensor::new([n, widths[0]], f)?,
        logits: Tensor::new([n, widths[1]], z)?,
        adm_features: Tensor::new([n, widths[2]], fa)?,
        adm_logits: Tensor::new([n, widths[3]], za)?,
    })
}

/// Mean loss components over one adaptation epoch, weighted by batch size.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossMeans {
    pub im: f64,
    pub cst: f64,
    pub cmk: f64,
    pub total: f64,
    /// Batches whose MMD term was skipped.
    pub cmk_skipped: usize,
}

/// What one adaptation epoch saw and produced. Contains no ground truth.
pub struct EpochReport<'a, T> {
    pub epoch: usize,
    pub losses: LossMeans,
    /// Banks the epoch trained against, built before its first step.
    pub bank: &'a MemoryBank<T>,
    pub classifier_labels: &'a [usize],
    pub assistant_labels: &'a [usize],
    /// Labels the epoch optimized against.
    pub final_labels: &'a [usize],
    pub degraded: bool,
    /// Classifier predictions after the epoch's updates.
    pub predictions: &'a [usize],
}

impl<T: Real> EpochReport<'_, T> {
    /// Metrics row scored against `truth`, which the adaptation never sees.
    pub fn metrics(&self, truth: &[usize]) -> MetricsRow {
        let easy_pred: Vec<usize> = self.bank.easy.labels.clone();
        let easy_truth: Vec<usize> = self.bank.easy.indices.iter().map(|&i| truth[i]).collect();
        MetricsRow {
            epoch: self.epoch,
            l_im: self.losses.im,
            l_cst: self.losses.cst,
            l_cmk: self.losses.cmk,
            l_total: self.losses.total,
            easy_count: self.bank.easy.indices.len(),
            hard_count: self.bank.hard.indices.len(),
            pl_acc_easy: accuracy(&easy_pred, &easy_truth),
            pl_acc_all: accuracy(self.classifier_labels, truth),
            target_acc: accuracy(self.predictions, truth),
        }
    }

    /// Metrics row without ground truth; accuracy columns are `NaN`.
    pub fn unscored_metrics(&self) -> MetricsRow {
        MetricsRow {
            epoch: self.epoch,
            l_im: self.losses.im,
            l_cst: self.losses.cst,
            l_cmk: self.losses.cmk,
            l_total: self.losses.total,
            easy_count: self.bank.easy.indices.len(),
            hard_count: self.bank.hard.indices.len(),
            pl_acc_easy: f64::NAN,
            pl_acc_all: f64::NAN,
            target_acc: f64::NAN,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptSummary {
    pub initial_predictions: Vec<usize>,
    pub final_predictions: Vec<usize>,
    pub losses: Vec<LossMeans>,
}

/// Stage 2: classifier and assistant frozen; the backbone minimizes
/// `L_im + α·L_cst + β·L_cmk` against per-epoch consensus pseudo-labels.
pub fn adapt_target<T: Real>(
    model: &mut Model<T>,
    images: &Tensor<f32>,
    cfg: &AdaptConfig,
    observer: &mut dyn FnMut(&EpochReport<'_, T>) -> Result<()>,
) -> Result<AdaptSummary> {
    cfg.validate()?;
    let n = count(images)?;
    model.state.set_frozen(ParamGroup::Backbone, false);
    model.state.set_frozen(ParamGroup::Classifier, true);
    model.state.set_frozen(ParamGroup::Adm, true);
    let sgd = cfg.sgd();
    let per_epoch = n.div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.target_epochs;
    let mut step = 0;

    let mut ex = extract(model, images)?;
    let initial_predictions = argmax_rows(&ex.logits);
    let mut predictions = initial_predictions.clone();
    let mut history = Vec::with_capacity(cfg.target_epochs);
    for epoch in 1..=cfg.target_epochs {
        let lc = pseudolabel::evaluate(&ex.features, &ex.logits, cfg.centroids, Space::Classifier)?;
        let lg = pseudolabel::evaluate(&ex.adm_features, &ex.adm_logits, cfg.centroids, Space::Assistant)?;
        let cons = consistency::build(&lc, &lg, &ex.features, cfg.k, epoch)?;
        let easy_mask = cons.bank.easy_mask();

        let mut m = LossMeans::default();
        let mut seen = 0usize;
        for idx in batches(n, cfg.batch_size, &mut epoch_rng(cfg.seed, 2, epoch)) {
            let x = batch_images::<T>(images, &idx)?;
            let y: Vec<usize> = idx.iter().map(|&i| cons.labels[i]).collect();
            let mask: Vec<bool> = idx.iter().map(|&i| easy_mask[i]).collect();
            let mut tape = Tape::new();
            let (grads, vars, parts, skipped) = {
                let bound = model.state.bind(&mut tape);
                let out = model.forward(&mut tape, &bound, &x, ForwardMode::EVAL)?;
                let (_, za) = out.adm()?;
                let im = losses::im_loss(&mut tape, out.logits)?;
                let cst = losses::cst_loss(&mut tape, out.logits, za, &y)?;
                let mmd = losses::cmk_mmd_batch(&mut tape, out.features, &mask, &y, &cfg.kernel)?;
                let loss = losses::total_loss(&mut tape, im, cst, mmd.value, cfg.weights)?;
                let grads = tape.backward(loss)?;
                let parts = [im, cst, mmd.value, loss].map(|v| tape.value(v).item().to_f64_lossy());
                (grads, bound.vars().to_vec(), parts, mmd.skipped)
            };
            sgd.step(&mut model.state, &vars, &grads, cfg.lr_at(cfg.target_lr(), step, total))?;
            step += 1;
            let w = idx.len() as f64;
            m.im += parts[0] * w;
            m.cst += parts[1] * w;
            m.cmk += parts[2] * w;
            m.total += parts[3] * w;
            m.cmk_skipped += skipped as usize;
            seen += idx.len();
        }
        let s = seen as f64;
        (m.im, m.cst, m.cmk, m.total) = (m.im / s, m.cst / s, m.cmk / s, m.total / s);

        ex = extract(model, images)?;
        predictions = argmax_rows(&ex.logits);
        log::info!(
            "target epoch {epoch}: total {:.4} (im {:.4} cst {:.4} cmk {:.4}) easy {} hard {}{}",
            m.total,
            m.im,
            m.cst,
            m.cmk,
            cons.bank.easy.indices.len(),
            cons.bank.hard.indices.len(),
            if cons.degraded { " [degraded]" } else { "" }
        );
        observer(&EpochReport {
            epoch,
            losses: m,
            bank: &cons.bank,
            classifier_labels: &lc.labels,
            assistant_labels: &lg.labels,
            final_labels: &cons.labels,
            degraded: cons.degraded,
            predictions: &predictions,
        })?;
        history.push(m);
    }
    Ok(AdaptSummary {
        initial_predictions,
        final_predictions: predictions,
        losses: history,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    /// Accuracy within each true class; `NaN` for classes absent from `truth`.
    pub per_class: Vec<f64>,
    pub predictions: Vec<usize>,
    /// Information-maximization loss over the whole set.
    pub im_loss: f64,
    pub ce_loss: f64,
}

pub fn evaluate<T: Real>(model: &Model<T>, images: &Tensor<f32>, truth: &[usize]) -> Result<EvalReport> {
    let ex = extract(model, images)?;
    if truth.len() != ex.logits.shape()[0] {
        return Err(CoreError::InvalidInput(format!(
            "{} labels for {} images",
            truth.len(),
            ex.logits.shape()[0]
        )));
    }
    let predictions = argmax_rows(&ex.logits);
    let c = model.backbone.num_classes;
    let mut hit = vec![0usize; c];
    let mut tot = vec![0usize; c];
    for (&p, &t) in predictions.iter().zip(truth) {
        if t < c {
            tot[t] += 1;
            hit[t] += (p == t) as usize;
        }
    }
    let mut tape = Tape::new();
    let z = tape.constant(ex.logits.clone());
    let im = losses::im_loss(&mut tape, z)?;
    let ce = losses::ce_loss(&mut tape, z, truth)?;
    Ok(EvalReport {
        accuracy: accuracy(&predictions, truth),
        per_class: hit
            .iter()
            .zip(&tot)
            .map(|(&h, &t)| if t == 0 { f64::NAN } else { h as f64 / t as f64 })
            .collect(),
        predictions,
        im_loss: tape.value(im).item().to_f64_lossy(),
        ce_loss: tape.value(ce).item().to_f64_lossy(),
    })
}
