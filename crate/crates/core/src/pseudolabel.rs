//! Dynamic centroid evaluation: soft class centroids refined by cosine
//! nearest-centroid assignment.

use sfda_tensor::{Real, Tensor};

use crate::error::{CoreError, Result};

/// Guards centroid denominators and vector norms.
pub const EPS: f64 = 1e-12;

/// Feature space a set of pseudo-labels was computed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Space {
    Classifier,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoLabels {
    pub labels: Vec<usize>,
    pub space: Space,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CentroidConfig {
    /// Weight of the previous centroid in the blend `c ← λ_c·c_prev + (1 − λ_c)·c_new`.
    pub momentum: f64,
    pub rounds: usize,
}

impl Default for CentroidConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            rounds: 2,
        }
    }
}

fn check_rows<T: Real>(what: &str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        [n, d] => Ok((*n, *d)),
        s => Err(CoreError::InvalidInput(format!("{what} must be a matrix, got shape {s:?}"))),
    }
}

/// `c_k = Σᵢ p_ik·fᵢ / Σᵢ p_ik` with `p_i = softmax(zᵢ)`.
pub fn init_centroids<T: Real>(feats: &Tensor<T>, logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, f) = check_rows("features", feats)?;
    let (nz, c) = check_rows("logits", logits)?;
    if n == 0 {
        return Err(CoreError::EmptyInput("centroid initialization over zero samples".into()));
    }
    if nz != n {
        return Err(CoreError::InvalidInput(format!("{n} features but {nz} logit rows")));
    }
    let mut num = vec![T::zero(); c * f];
    let mut den = vec![T::zero(); c];
    let mut p = vec![T::zero(); c];
    for i in 0..n {
        softmax_row(logits.row(i), &mut p);
        let fi = feats.row(i);
        for k in 0..c {
            den[k] = den[k] + p[k];
            for (acc, &x) in num[k * f..(k + 1) * f].iter_mut().zip(fi) {
                *acc = *acc + p[k] * x;
            }
        }
    }
    let eps = T::lit(EPS);
    for k in 0..c {
        let d = den[k].max(eps);
        num[k * f..(k + 1) * f].iter_mut().for_each(|v| *v = *v / d);
    }
    let centroids = Tensor::new([c, f], num)?;
    for k in 0..c {
        if centroids.row(k).iter().all(|v| v.is_zero()) {
            log::warn!("centroid {k} is the zero vector after initialization");
        }
    }
    Ok(centroids)
}

fn softmax_row<T: Real>(z: &[T], out: &mut [T]) {
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - m).exp();
        s = s + *o;
    }
    out.iter_mut().for_each(|o| *o = *o / s);
}

fn norm<T: Real>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |a, &x| a + x * x).sqrt()
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// `ŷᵢ = argmin_k (1 − cos(fᵢ, c_k))`, ties to the smallest class index.
#[allow(clippy::needless_range_loop)]
pub fn assign_labels<T: Real>(feats: &Tensor<T>, centroids: &Tensor<T>) -> Result<Vec<usize>> {
    let (n, f) = check_rows("features", feats)?;
    let (c, fc) = check_rows("centroids", centroids)?;
    if f != fc {
        return Err(CoreError::InvalidInput(format!("feature width {f} vs centroid width {fc}")));
    }
    if c == 0 {
        return Err(CoreError::EmptyInput("no centroids".into()));
    }
    let eps = T::lit(EPS);
    let cnorm: Vec<T> = (0..c).map(|k| norm(centroids.row(k)).max(eps)).collect();
    Ok((0..n)
        .map(|i| {
            let fi = feats.row(i);
            let fnorm = norm(fi).max(eps);
            let mut best = 0;
            let mut best_d = T::infinity();
            for k in 0..c {
                let d = T::one() - dot(fi, centroids.row(k)) / (fnorm * cnorm[k]);
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            best
        })
        .collect())
}

/// Hard-assignment class means; a class with no members keeps `prev`'s row.
pub fn refine<T: Real>(feats: &Tensor<T>, labels: &[usize], prev: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, f) = check_rows("features", feats)?;
    let (c, _) = check_rows("centroids", prev)?;
    if labels.len() != n {
        return Err(CoreError::InvalidInput(format!("{} labels for {n} samples", labels.len())));
    }
    let mut sum = vec![T::zero(); c * f];
    let mut count = vec![0usize; c];
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(CoreError::InvalidInput(format!("label {y} outside {c} classes")));
        }
        count[y] += 1;
        for (acc, &x) in sum[y * f..(y + 1) * f].iter_mut().zip(feats.row(i)) {
            *acc = *acc + x;
        }
    }
    for k in 0..c {
        let row = &mut sum[k * f..(k + 1) * f];
        if count[k] == 0 {
            log::debug!("class {k} received no samples; keeping previous centroid");
            row.copy_from_slice(prev.row(k));
        } else {
            let inv = T::one() / T::lit(count[k] as f64);
            row.iter_mut().for_each(|v| *v = *v * inv);
        }
    }
    Ok(Tensor::new([c, f], sum)?)
}

/// Initialize, assign, then `rounds` × {refine, blend, assign}.
pub fn evaluate<T: Real>(
    feats: &Tensor<T>,
    logits: &Tensor<T>,
    cfg: CentroidConfig,
    space: Space,
) -> Result<PseudoLabels> {
    if !(0.0..=1.0).contains(&cfg.momentum) {
        return Err(CoreError::Config(format!("centroid momentum {} outside [0, 1]", cfg.momentum)));
    }
    let mut centroids = init_centroids(feats, logits)?;
    let mut labels = assign_labels(feats, &centroids)?;
    let (keep, new) = (T::lit(cfg.momentum), T::lit(1.0 - cfg.momentum));
    for _ in 0..cfg.rounds {
        let fresh = refine(feats, &labels, &centroids)?;
        for (c, &r) in centroids.data_mut().iter_mut().zip(fresh.data()) {
            *c = keep * *c + new * r;
        }
        labels = assign_labels(feats, &centroids)?;
    }
    Ok(PseudoLabels { labels, space })
}

/// Fraction of positions where `pred` equals `truth`; 0 for empty input.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / pred.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        let rows: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
        Tensor::from_rows(&rows).unwrap()
    }

    #[test]
    fn uniform_logits_give_the_plain_mean() {
        let f = t(&[&[1.0, 2.0], &[3.0, 6.0], &[5.0, 1.0]]);
        let c = init_centroids(&f, &Tensor::zeros([3, 2])).unwrap();
        for k in 0..2 {
            assert!((c.row(k)[0] - 3.0).abs() < 1e-12);
            assert!((c.row(k)[1] - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn confident_logits_pick_out_their_sample() {
        let f = t(&[&[1.0, 0.5], &[-2.0, 4.0]]);
        let z = t(&[&[10.0, 0.0], &[0.0, 10.0]]);
        let c = init_centroids(&f, &z).unwrap();
        // oracle: weights e^10/(e^10+1) and 1/(e^10+1)
        let w = 1.0 / (1.0 + (-10f64).exp());
        let c0 = [w * 1.0 + (1.0 - w) * -2.0, w * 0.5 + (1.0 - w) * 4.0];
        assert!((c.row(0)[0] - c0[0]).abs() < 1e-12 && (c.row(0)[1] - c0[1]).abs() < 1e-12);
        assert!((c.row(0)[0] - 1.0).abs() < 1e-3 && (c.row(1)[1] - 4.0).abs() < 1e-3);
    }

    #[test]
    fn single_sample_is_every_centroid() {
        let f = t(&[&[0.3, -0.7, 2.0]]);
        let c = init_centroids(&f, &t(&[&[1.0, -3.0]])).unwrap();
        assert_eq!(c.row(0), f.row(0));
        assert_eq!(c.row(1), f.row(0));
    }

    #[test]
    fn empty_input_is_an_error() {
        let err = init_centroids::<f64>(&Tensor::zeros([0, 2]), &Tensor::zeros([0, 3])).unwrap_err();
        assert!(matches!(err, CoreError::EmptyInput(_)));
    }

    #[test]
    fn assignment_examples() {
        let c = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(assign_labels(&t(&[&[1.0, 0.0]]), &c).unwrap(), vec![0]);
        assert_eq!(assign_labels(&t(&[&[1.0, 1.0]]), &c).unwrap(), vec![0]);
        assert_eq!(assign_labels(&t(&[&[0.1, 2.0]]), &c).unwrap(), vec![1]);
    }

    #[test]
    fn zero_rounds_uses_initial_centroids() {
        let f = t(&[&[1.0, 0.1], &[0.2, 1.0], &[0.9, 0.8]]);
        let z = t(&[&[2.0, 0.0], &[0.0, 2.0], &[0.0, 0.0]]);
        let cfg = CentroidConfig { momentum: 0.9, rounds: 0 };
        let got = evaluate(&f, &z, cfg, Space::Classifier).unwrap();
        let c = init_centroids(&f, &z).unwrap();
        assert_eq!(got.labels, assign_labels(&f, &c).unwrap());
    }

    #[test]
    fn empty_class_keeps_previous_centroid() {
        let f = t(&[&[1.0, 0.0], &[3.0, 0.0]]);
        let prev = t(&[&[0.0, 0.0], &[7.0, 7.0]]);
        let c = refine(&f, &[0, 0], &prev).unwrap();
        assert_eq!(c.row(0), &[2.0, 0.0]);
        assert_eq!(c.row(1), &[7.0, 7.0]);
    }
}
