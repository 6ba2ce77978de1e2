//! Central finite-difference checks of recorded gradients.
//!
//! The numeric side only ever evaluates the forward function, so it is
//! independent of every adjoint rule it checks.

use crate::error::Result;
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Magnitudes below this are treated as absolute rather than relative error.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Outcome of comparing analytic and numeric partial derivatives.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(input index, element index, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
    /// Candidates rejected because the difference stencil crossed a ReLU kink.
    pub skipped: usize,
}

impl GradCheckReport {
    fn record(&mut self, i: usize, j: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if err >= self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(err);
            self.worst = Some((i, j, analytic, numeric));
        }
    }
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Central difference `(f(x+h) − f(x−h)) / 2h` of a scalar function of one coordinate.
pub fn central_difference(mut f: impl FnMut(f64) -> Result<f64>, x: f64, h: f64) -> Result<f64> {
    Ok((f(x + h)? - f(x - h)?) / (2.0 * h))
}

/// Output value and ReLU sign signature of one forward evaluation.
fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<(f64, Vec<bool>)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok((tape.value(out).sum_all(), tape.kink_signature()))
}

fn analytic<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<Vec<Option<Tensor<f64>>>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let mut grads = tape.backward(out)?;
    Ok(vars.iter().map(|&v| grads.take(v)).collect())
}

/// Central difference at one coordinate plus whether the two probes saw
/// different ReLU sign patterns.
fn probe<F>(f: &F, probe: &mut [Tensor<f64>], i: usize, j: usize, h: f64) -> Result<(f64, bool)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let x0 = probe[i].data()[j];
    probe[i].data_mut()[j] = x0 + h;
    let hi = eval(f, probe);
    probe[i].data_mut()[j] = x0 - h;
    let lo = eval(f, probe);
    probe[i].data_mut()[j] = x0;
    let ((hi, sig_hi), (lo, sig_lo)) = (hi?, lo?);
    Ok(((hi - lo) / (2.0 * h), sig_hi != sig_lo))
}

/// Checks `∂f/∂inputs` at the listed `(input, element)` coordinates, or at
/// every coordinate when `coords` is `None`. `f` must return a scalar.
pub fn check_gradients<F>(
    inputs: &[Tensor<f64>],
    f: F,
    h: f64,
    coords: Option<&[(usize, usize)]>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let grads = analytic(&f, inputs)?;
    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = inputs
                .iter()
                .enumerate()
                .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
                .collect();
            &all
        }
    };
    let mut report = GradCheckReport::default();
    let mut scratch = inputs.to_vec();
    for &(i, j) in coords {
        let a = grads[i].as_ref().map_or(0.0, |g| g.data()[j]);
        let (numeric, _) = probe(&f, &mut scratch, i, j, h)?;
        report.record(i, j, a, numeric);
    }
    Ok(report)
}

/// Like [`check_gradients`], but draws coordinates from `candidates` until
/// `want` of them have been checked, skipping any whose stencil `x ± h`
/// crosses a ReLU kink: there the function is not differentiable at scale `h`
/// and the central difference measures a chord, not the derivative.
pub fn check_gradients_smooth<F>(
    inputs: &[Tensor<f64>],
    f: F,
    h: f64,
    candidates: impl IntoIterator<Item = (usize, usize)>,
    want: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let grads = analytic(&f, inputs)?;
    let mut report = GradCheckReport::default();
    let mut scratch = inputs.to_vec();
    for (i, j) in candidates {
        if report.checked == want {
            break;
        }
        let (numeric, crossed) = probe(&f, &mut scratch, i, j, h)?;
        if crossed {
            report.skipped += 1;
            continue;
        }
        let a = grads[i].as_ref().map_or(0.0, |g| g.data()[j]);
        report.record(i, j, a, numeric);
    }
    Ok(report)
}

impl<T: Real> Tensor<T> {
    /// Sum of all elements in `f64`, in storage order.
    pub fn sum_all(&self) -> f64 {
        self.data().iter().map(|v| v.to_f64_lossy()).sum()
    }
}
