//! Target-stage objectives: information maximization, consistency
//! cross-entropy, class-conditional multi-kernel MMD and their weighted sum.

use sfda_tensor::{Real, Tape, Tensor, Var};

use crate::error::{CoreError, Result};

/// Guard inside `log(p̄ + ε)` of the diversity term.
pub const LOG_EPS: f64 = 1e-12;
/// Floor on squared kernel bandwidths.
pub const BANDWIDTH_FLOOR: f64 = 1e-12;

/// Gaussian kernel family `K = Σ_u γ_u·exp(−‖a − b‖² / (2σ_u²))`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    /// `σ_u = multiplier_u · σ`.
    pub multipliers: Vec<f64>,
    pub weights: Vec<f64>,
    /// Fixed base bandwidth `σ`. `None` uses the median heuristic: `σ²` is the
    /// median pairwise squared distance of the pooled subset.
    pub bandwidth: Option<f64>,
    /// Compare the easy and hard sets as wholes, ignoring labels.
    pub pooled: bool,
}

impl Default for KernelSpec {
    fn default() -> Self {
        let multipliers = vec![0.25, 0.5, 1.0, 2.0, 4.0];
        let weights = vec![1.0 / multipliers.len() as f64; multipliers.len()];
        Self {
            multipliers,
            weights,
            bandwidth: None,
            pooled: false,
        }
    }
}

impl KernelSpec {
    /// One Gaussian kernel of fixed bandwidth `sigma`.
    pub fn single(sigma: f64) -> Self {
        Self {
            multipliers: vec![1.0],
            weights: vec![1.0],
            bandwidth: Some(sigma),
            pooled: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.multipliers.is_empty() || self.multipliers.len() != self.weights.len() {
            return Err(CoreError::Config(format!(
                "kernel needs at least one multiplier and one weight per multiplier ({} vs {})",
                self.multipliers.len(),
                self.weights.len()
            )));
        }
        if self.weights.iter().any(|&g| !(g >= 0.0)) || self.multipliers.iter().any(|&m| !(m > 0.0)) {
            return Err(CoreError::Config("kernel weights must be ≥ 0 and multipliers > 0".into()));
        }
        if matches!(self.bandwidth, Some(s) if !(s > 0.0)) {
            return Err(CoreError::Config("fixed kernel bandwidth must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 0.3, beta: 0.1 }
    }
}

/// Mean per-sample entropy of `softmax(z)` plus `Σ_k p̄_k·log(p̄_k + ε)`.
pub fn im_loss<T: Real>(tape: &mut Tape<T>, logits: Var) -> Result<Var> {
    if tape.shape(logits).first().copied().unwrap_or(0) == 0 {
        return Err(CoreError::EmptyInput("information maximization over an empty batch".into()));
    }
    let p = tape.softmax(logits, 1)?;
    let logp = tape.log_softmax(logits, 1)?;
    let plogp = tape.mul(p, logp)?;
    let neg_ent = tape.sum_axis(plogp, 1)?;
    let neg_ent = tape.mean(neg_ent);
    let ent = tape.neg(neg_ent);
    let pbar = tape.mean_axis(p, 0)?;
    let guarded = tape.add_scalar(pbar, LOG_EPS);
    let log_pbar = tape.log(guarded);
    let div = tape.mul(pbar, log_pbar)?;
    let div = tape.sum(div);
    Ok(tape.add(ent, div)?)
}

fn cross_entropy<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(CoreError::InvalidInput(format!("{} labels for logits {s:?}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= s[1]) {
        return Err(CoreError::InvalidInput(format!("label {bad} outside {} classes", s[1])));
    }
    let logp = tape.log_softmax(logits, 1)?;
    let picked = tape.pick(logp, labels)?;
    let m = tape.mean(picked);
    Ok(tape.neg(m))
}

/// Mean cross-entropy of both heads against the same labels.
pub fn cst_loss<T: Real>(tape: &mut Tape<T>, logits: Var, adm_logits: Var, labels: &[usize]) -> Result<Var> {
    let a = cross_entropy(tape, adm_logits, labels)?;
    let t = cross_entropy(tape, logits, labels)?;
    Ok(tape.add(a, t)?)
}

/// Supervised cross-entropy of one head.
pub fn ce_loss<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    cross_entropy(tape, logits, labels)
}

#[derive(Debug, Clone, Copy)]
pub struct Mmd {
    pub value: Var,
    /// No class was present on both sides; `value` is a constant zero.
    pub skipped: bool,
    /// Number of classes averaged over.
    pub classes: usize,
}

fn median_pairwise<T: Real>(d: &Tensor<T>) -> f64 {
    let n = d.shape()[0];
    let mut v: Vec<f64> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .map(|(i, j)| d.row(i)[j].to_f64_lossy())
        .collect();
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let h = v.len() / 2;
    if v.len() % 2 == 1 {
        v[h]
    } else {
        0.5 * (v[h - 1] + v[h])
    }
}

/// Biased multi-kernel MMD² between row sets `x` and `y`. Bandwidths are
/// treated as constants. The final reduction is order-independent, so the
/// value is bitwise invariant to permuting rows within either set.
fn mk_mmd<T: Real>(tape: &mut Tape<T>, x: Var, y: Var, spec: &KernelSpec) -> Result<Var> {
    let (m, n) = (tape.shape(x)[0], tape.shape(y)[0]);
    let z = tape.concat(&[x, y], 0)?;
    let d = tape.sq_dist(z, z)?;
    let sigma2 = match spec.bandwidth {
        Some(s) => s * s,
        None => median_pairwise(tape.value(d)),
    };
    let mut k: Option<Var> = None;
    for (&mult, &gamma) in spec.multipliers.iter().zip(&spec.weights) {
        let s2 = (mult * mult * sigma2).max(BANDWIDTH_FLOOR);
        let arg = tape.scale(d, -1.0 / (2.0 * s2));
        let e = tape.exp(arg);
        let term = tape.scale(e, gamma);
        k = Some(match k {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    let k = k.expect("validated kernel spec has a multiplier");
    let total = m + n;
    let (wx, wy, wxy) = (1.0 / (m * m) as f64, 1.0 / (n * n) as f64, -1.0 / (m * n) as f64);
    let w = Tensor::from_fn([total, total], |idx| {
        let (i, j) = (idx / total, idx % total);
        T::lit(match (i < m, j < m) {
            (true, true) => wx,
            (false, false) => wy,
            _ => wxy,
        })
    });
    let w = tape.constant(w);
    let weighted = tape.mul(k, w)?;
    Ok(tape.sum_sorted(weighted))
}

/// Class-conditional multi-kernel MMD² between easy rows and hard rows.
///
/// For every class present on both sides the biased MMD² of the two class
/// subsets is computed; the result is their mean. Returns a constant zero
/// with `skipped` set when either side is empty or no class is shared.
pub fn cmk_mmd<T: Real>(
    tape: &mut Tape<T>,
    easy: Var,
    easy_labels: &[usize],
    hard: Var,
    hard_labels: &[usize],
    spec: &KernelSpec,
) -> Result<Mmd> {
    spec.validate()?;
    let (es, hs) = (tape.shape(easy).to_vec(), tape.shape(hard).to_vec());
    if es.len() != 2 || hs.len() != 2 || es[1] != hs[1] || es[0] != easy_labels.len() || hs[0] != hard_labels.len() {
        return Err(CoreError::InvalidInput(format!(
            "easy {es:?} / hard {hs:?} do not match {} / {} labels",
            easy_labels.len(),
            hard_labels.len()
        )));
    }
    let skip = |tape: &mut Tape<T>| Mmd {
        value: tape.constant(Tensor::scalar(T::zero())),
        skipped: true,
        classes: 0,
    };
    if easy_labels.is_empty() || hard_labels.is_empty() {
        return Ok(skip(tape));
    }
    if spec.pooled {
        let value = mk_mmd(tape, easy, hard, spec)?;
        return Ok(Mmd {
            value,
            skipped: false,
            classes: 1,
        });
    }
    let classes = easy_labels.iter().chain(hard_labels).max().map_or(0, |&c| c + 1);
    let members = |labels: &[usize], c: usize| -> Vec<usize> {
        labels.iter().enumerate().filter(|(_, &y)| y == c).map(|(i, _)| i).collect()
    };
    let mut per_class = Vec::new();
    for c in 0..classes {
        let (ie, ih) = (members(easy_labels, c), members(hard_labels, c));
        if ie.is_empty() || ih.is_empty() {
            continue;
        }
        let x = tape.gather_rows(easy, &ie)?;
        let y = tape.gather_rows(hard, &ih)?;
        per_class.push(mk_mmd(tape, x, y, spec)?);
    }
    if per_class.is_empty() {
        return Ok(skip(tape));
    }
    let count = per_class.len();
    let mut acc = per_class[0];
    for &v in &per_class[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(Mmd {
        value: tape.scale(acc, 1.0 / count as f64),
        skipped: false,
        classes: count,
    })
}

/// [`cmk_mmd`] over one batch, split by bank membership.
pub fn cmk_mmd_batch<T: Real>(
    tape: &mut Tape<T>,
    feats: Var,
    easy_mask: &[bool],
    labels: &[usize],
    spec: &KernelSpec,
) -> Result<Mmd> {
    if easy_mask.len() != labels.len() || tape.shape(feats).first() != Some(&labels.len()) {
        return Err(CoreError::InvalidInput(format!(
            "{} flags and {} labels for a batch of shape {:?}",
            easy_mask.len(),
            labels.len(),
            tape.shape(feats)
        )));
    }
    let (ie, ih): (Vec<usize>, Vec<usize>) = (0..labels.len()).partition(|&i| easy_mask[i]);
    let easy = tape.gather_rows(feats, &ie)?;
    let hard = tape.gather_rows(feats, &ih)?;
    let el: Vec<usize> = ie.iter().map(|&i| labels[i]).collect();
    let hl: Vec<usize> = ih.iter().map(|&i| labels[i]).collect();
    cmk_mmd(tape, easy, &el, hard, &hl, spec)
}

/// `L_im + α·L_cst + β·L_cmk`.
pub fn total_loss<T: Real>(tape: &mut Tape<T>, im: Var, cst: Var, cmk: Var, w: LossWeights) -> Result<Var> {
    if !(w.alpha >= 0.0 && w.beta >= 0.0) {
        return Err(CoreError::Config(format!("loss weights must be ≥ 0, got α={} β={}", w.alpha, w.beta)));
    }
    let a = tape.scale(cst, w.alpha);
    let b = tape.scale(cmk, w.beta);
    let s = tape.add(im, a)?;
    Ok(tape.add(s, b)?)
}
