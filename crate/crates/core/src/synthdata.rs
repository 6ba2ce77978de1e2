//! Deterministic two-domain image generator.
//!
//! Every class is a horizontal bar at a class-specific position, so position
//! alone identifies the class. The source domain shows the bars with small jitter. Easy target samples add
//! noise and a brightness shift; hard target samples additionally rotate the
//! bar about its own centre, occlude a square patch and use stronger noise.
//! Rotation about the centre keeps the position, so the class stays readable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sfda_tensor::Tensor;

use crate::error::{CoreError, Result};
use crate::io::dataset::Sidecar;

#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub image_side: usize,
    /// Source pixel noise.
    pub source_noise: f64,
    pub easy_noise: f64,
    /// Maximum absolute brightness shift of target samples.
    pub brightness: f64,
    /// Hard rotation range in degrees, counter-clockwise in image coordinates.
    pub rotation: (f64, f64),
    pub occlusion: usize,
    pub hard_noise: f64,
    pub hard_fraction: f64,
    pub seed: u64,
}

impl Default for DomainSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            per_class: 100,
            image_side: 16,
            source_noise: 0.05,
            easy_noise: 0.1,
            brightness: 0.1,
            rotation: (30.0, 60.0),
            occlusion: 4,
            hard_noise: 0.3,
            hard_fraction: 0.4,
            seed: 0,
        }
    }
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::Config(m.to_string()));
        if self.num_classes == 0 || self.num_classes > 8 {
            return bad("synthetic data supports 1 to 8 classes");
        }
        if self.per_class == 0 {
            return bad("per_class must be positive");
        }
        if self.image_side < 8 {
            return bad("image_side must be at least 8");
        }
        if !(0.0..=1.0).contains(&self.hard_fraction) {
            return bad("hard_fraction must lie in [0, 1]");
        }
        if self.rotation.0 > self.rotation.1 || self.rotation.0 < 0.0 {
            return bad("rotation range must be 0 ≤ min ≤ max");
        }
        if self.occlusion > self.image_side {
            return bad("occlusion patch larger than the image");
        }
        if [self.source_noise, self.easy_noise, self.hard_noise, self.brightness]
            .iter()
            .any(|&v| !(v >= 0.0))
        {
            return bad("noise levels and brightness must be ≥ 0");
        }
        Ok(())
    }

    /// Hard samples per class: the fraction rounded, kept within `1..per_class`
    /// when the fraction is strictly between 0 and 1.
    pub fn hard_per_class(&self) -> usize {
        let h = (self.hard_fraction * self.per_class as f64).round() as usize;
        if self.hard_fraction > 0.0 && self.hard_fraction < 1.0 && self.per_class >= 2 {
            h.clamp(1, self.per_class - 1)
        } else {
            h.min(self.per_class)
        }
    }
}

/// Bar geometry of one class in pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bar {
    pub cx: f64,
    pub cy: f64,
    /// Radians.
    pub angle: f64,
    pub half_len: f64,
    pub half_width: f64,
}

/// Class `k`'s template bar: horizontal, centred in one cell of a 2-column grid.
pub fn class_bar(spec: &DomainSpec, k: usize) -> Bar {
    let s = spec.image_side as f64;
    let rows = spec.num_classes.div_ceil(2).max(1) as f64;
    let (col, row) = ((k % 2) as f64, (k / 2) as f64);
    Bar {
        cx: (col + 0.5) * s / 2.0,
        cy: (row + 0.5) * s / rows,
        angle: 0.0,
        half_len: s * 0.2,
        half_width: 0.9,
    }
}

fn render(bar: &Bar, side: usize, out: &mut [f32]) {
    let (c, s) = (bar.angle.cos(), bar.angle.sin());
    for y in 0..side {
        for x in 0..side {
            let (dx, dy) = (x as f64 + 0.5 - bar.cx, y as f64 + 0.5 - bar.cy);
            let along = dx * c + dy * s;
            let across = -dx * s + dy * c;
            let ex = (along.abs() - bar.half_len).max(0.0);
            let ey = (across.abs() - bar.half_width).max(0.0);
            let d = (ex * ex + ey * ey).sqrt();
            out[y * side + x] = (1.0 - d).clamp(0.0, 1.0) as f32;
        }
    }
}

/// Noise-free template image `[1, side, side]` of class `k`.
pub fn template(spec: &DomainSpec, k: usize) -> Tensor<f32> {
    let side = spec.image_side;
    let mut px = vec![0.0; side * side];
    render(&class_bar(spec, k), side, &mut px);
    Tensor::new([1, side, side], px).expect("template shape")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Source,
    Easy,
    Hard,
}

fn sample(spec: &DomainSpec, class: usize, kind: Kind, rng: &mut ChaCha8Rng, out: &mut [f32]) {
    let side = spec.image_side;
    let mut bar = class_bar(spec, class);
    bar.cx += rng.gen_range(-0.75..=0.75);
    bar.cy += rng.gen_range(-0.75..=0.75);
    bar.angle += rng.gen_range(-5f64..=5.0).to_radians();
    if kind == Kind::Hard {
        bar.angle += rng.gen_range(spec.rotation.0..=spec.rotation.1).to_radians();
    }
    render(&bar, side, out);
    let noise = match kind {
        Kind::Source => spec.source_noise,
        Kind::Easy => spec.easy_noise,
        Kind::Hard => spec.hard_noise,
    };
    let shift = if kind == Kind::Source || spec.brightness == 0.0 {
        0.0
    } else {
        rng.gen_range(-spec.brightness..=spec.brightness)
    };
    if kind == Kind::Hard && spec.occlusion > 0 {
        let o = spec.occlusion;
        let (ox, oy) = (rng.gen_range(0..=side - o), rng.gen_range(0..=side - o));
        for y in oy..oy + o {
            out[y * side + ox..y * side + ox + o].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let gauss = Normal::new(0.0, noise.max(0.0)).expect("finite noise");
    for v in out.iter_mut() {
        let n = if noise > 0.0 { gauss.sample(rng) } else { 0.0 };
        *v = (*v as f64 + shift + n).clamp(0.0, 1.0) as f32;
    }
}

/// Labeled source images.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

/// Target images with hidden annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSet {
    pub images: Tensor<f32>,
    pub sidecar: Sidecar,
}

/// Per-sample generator: independent stream per (domain, index).
fn sample_rng(seed: u64, domain: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((domain << 32) | index as u64);
    rng
}

fn shuffled(n: usize, seed: u64, domain: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut sample_rng(seed, domain | 0x100, 0));
    order
}

pub fn generate(spec: &DomainSpec) -> Result<(LabeledSet, TargetSet)> {
    spec.validate()?;
    let (c, per, side) = (spec.num_classes, spec.per_class, spec.image_side);
    let n = c * per;
    let px = side * side;
    let hard_per = spec.hard_per_class();

    let mut src = vec![0f32; n * px];
    let mut src_labels = vec![0; n];
    for (slot, &i) in shuffled(n, spec.seed, 0).iter().enumerate() {
        let class = i / per;
        let mut rng = sample_rng(spec.seed, 0, i);
        sample(spec, class, Kind::Source, &mut rng, &mut src[slot * px..(slot + 1) * px]);
        src_labels[slot] = class;
    }

    let mut tgt = vec![0f32; n * px];
    let mut truth = vec![0; n];
    let mut hard = vec![false; n];
    for (slot, &i) in shuffled(n, spec.seed, 1).iter().enumerate() {
        let (class, within) = (i / per, i % per);
        let kind = if within < hard_per { Kind::Hard } else { Kind::Easy };
        let mut rng = sample_rng(spec.seed, 1, i);
        sample(spec, class, kind, &mut rng, &mut tgt[slot * px..(slot + 1) * px]);
        truth[slot] = class;
        hard[slot] = kind == Kind::Hard;
    }

    Ok((
        LabeledSet {
            images: Tensor::new([n, 1, side, side], src)?,
            labels: src_labels,
        },
        TargetSet {
            images: Tensor::new([n, 1, side, side], tgt)?,
            sidecar: Sidecar { truth, hard },
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_clipped() {
        let spec = DomainSpec::default();
        let (s1, t1) = generate(&spec).unwrap();
        let (s2, t2) = generate(&spec).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(t1, t2);
        assert!(t1.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(s1.images.shape(), &[400, 1, 16, 16]);
    }

    #[test]
    fn every_class_has_easy_and_hard_targets() {
        let spec = DomainSpec {
            per_class: 5,
            hard_fraction: 0.01,
            ..DomainSpec::default()
        };
        let (_, t) = generate(&spec).unwrap();
        for k in 0..spec.num_classes {
            let tags: Vec<bool> = (0..t.sidecar.truth.len())
                .filter(|&i| t.sidecar.truth[i] == k)
                .map(|i| t.sidecar.hard[i])
                .collect();
            assert!(tags.iter().any(|&h| h) && tags.iter().any(|&h| !h));
        }
    }

    #[test]
    fn zero_hard_fraction_has_no_hard_samples() {
        let spec = DomainSpec {
            hard_fraction: 0.0,
            ..DomainSpec::default()
        };
        let (_, t) = generate(&spec).unwrap();
        assert!(t.sidecar.hard.iter().all(|&h| !h));
    }
}
