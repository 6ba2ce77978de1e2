//! Recorded primitives. Each method validates shapes, computes the output
//! value and pushes a node carrying what its adjoint needs.

use crate::error::{invalid, shape_err, Result, TensorError};
use crate::kernels::{self, split_axis, ConvGeom};
use crate::real::Real;
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

/// Which statistics batch normalization uses.
#[derive(Debug, Clone, Copy)]
pub enum NormMode<'a, T> {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with fixed running statistics.
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Per-channel batch statistics observed by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased (`m − 1`) variance, as used for running-statistic updates.
    pub var: Vec<T>,
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(TensorError::Axis {
            op,
            axis,
            shape: shape.to_vec(),
        });
    }
    Ok(())
}

fn trailing_match(x: &[usize], y: &[usize]) -> bool {
    y.len() <= x.len() && x[x.len() - y.len()..] == *y
}

impl<T: Real> Tape<T> {
    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return shape_err(op, va.shape(), vb.shape());
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("div", a, b, |x, y| x / y)?;
        Ok(self.push(out, Op::Div(a, b), &[a, b]))
    }

    fn bcast(&mut self, op: &'static str, x: Var, y: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (vx, vy) = (self.value(x), self.value(y));
        if !trailing_match(vx.shape(), vy.shape()) {
            return shape_err(op, vx.shape(), vy.shape());
        }
        let w = vy.len().max(1);
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &a)| f(a, vy.data()[i % w]))
            .collect();
        Tensor::new(vx.shape().to_vec(), data)
    }

    /// `x + y` where `y`'s shape equals the trailing dimensions of `x`.
    pub fn add_bcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let out = self.bcast("add_bcast", x, y, |a, b| a + b)?;
        Ok(self.push(out, Op::AddBcast(x, y), &[x, y]))
    }

    /// `x ⊙ y` where `y`'s shape equals the trailing dimensions of `x`.
    pub fn mul_bcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let out = self.bcast("mul_bcast", x, y, |a, b| a * b)?;
        Ok(self.push(out, Op::MulBcast(x, y), &[x, y]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::lit(c);
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::lit(c);
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddScalar(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(T::exp);
        self.push(out, Op::Exp(x), &[x])
    }

    /// Natural log; callers guard non-positive inputs.
    pub fn log(&mut self, x: Var) -> Var {
        let out = self.value(x).map(T::ln);
        self.push(out, Op::Log(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x), &[x])
    }

    /// GELU, tanh approximation `½x(1 + tanh(√(2/π)(x + 0.044715x³)))`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| gelu_parts(v).0);
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Sum of all elements accumulated in ascending value order, so the result
    /// is bitwise independent of element order. Same adjoint as [`Tape::sum`].
    pub fn sum_sorted(&mut self, x: Var) -> Var {
        let mut vals = self.value(x).data().to_vec();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        let s = vals.into_iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = T::lit(v.len().max(1) as f64);
        let s: T = v.data().iter().copied().sum();
        self.push(Tensor::scalar(s / n), Op::Mean(x), &[x])
    }

    /// Sums over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        check_axis("sum_axis", v.shape(), axis)?;
        let (outer, n, inner) = split_axis(v.shape(), axis);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for t in 0..n {
                let base = (o * n + t) * inner;
                for j in 0..inner {
                    out[o * inner + j] = out[o * inner + j] + v.data()[base + j];
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::SumAxis(x, axis), &[x]))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = self.value(x).shape().get(axis).copied().unwrap_or(1).max(1);
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    fn softmax_values(v: &Tensor<T>, axis: usize, log: bool) -> Tensor<T> {
        let (outer, n, inner) = split_axis(v.shape(), axis);
        let src = v.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |t: usize| (o * n + t) * inner + j;
                let mut mx = T::neg_infinity();
                for t in 0..n {
                    mx = mx.max(src[at(t)]);
                }
                let mut denom = T::zero();
                for t in 0..n {
                    denom = denom + (src[at(t)] - mx).exp();
                }
                if log {
                    let lse = denom.ln();
                    for t in 0..n {
                        out[at(t)] = src[at(t)] - mx - lse;
                    }
                } else {
                    for t in 0..n {
                        out[at(t)] = (src[at(t)] - mx).exp() / denom;
                    }
                }
            }
        }
        Tensor::new(v.shape().to_vec(), out).expect("same shape")
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        check_axis("softmax", self.shape(x), axis)?;
        let out = Self::softmax_values(self.value(x), axis, false);
        Ok(self.push(out, Op::Softmax(x, axis), &[x]))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        check_axis("log_softmax", self.shape(x), axis)?;
        let out = Self::softmax_values(self.value(x), axis, true);
        Ok(self.push(out, Op::LogSoftmax(x, axis), &[x]))
    }

    /// Rank-2 matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err("matmul", &sa, &sb);
        }
        self.bmm_impl(a, b, false, 1, sa[0], sa[1], sb[1], vec![sa[0], sb[1]])
    }

    /// Batched product of `[G, m, k]` with `[G, k, n]`, or with `[G, n, k]`
    /// transposed when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return shape_err("bmm", &sa, &sb);
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return shape_err("bmm", &sa, &sb);
        }
        self.bmm_impl(a, b, trans_b, g, m, k, n, vec![g, m, n])
    }

    #[allow(clippy::too_many_arguments)]
    fn bmm_impl(
        &mut self,
        a: Var,
        b: Var,
        trans_b: bool,
        groups: usize,
        m: usize,
        k: usize,
        n: usize,
        shape: Vec<usize>,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); groups * m * n];
        for g in 0..groups {
            let ag = &va[g * m * k..(g + 1) * m * k];
            let bg = &vb[g * k * n..(g + 1) * k * n];
            let og = &mut out[g * m * n..(g + 1) * m * n];
            if trans_b {
                kernels::gemm_nt_acc(ag, bg, og, m, k, n);
            } else {
                kernels::gemm_nn_acc(ag, bg, og, m, k, n);
            }
        }
        let out = Tensor::new(shape, out)?;
        Ok(self.push(
            out,
            Op::Bmm {
                a,
                b,
                trans_b,
                groups,
                m,
                k,
                n,
            },
            &[a, b],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let mut seen = vec![false; v.rank()];
        if axes.len() != v.rank() || axes.iter().any(|&a| a >= v.rank() || std::mem::replace(&mut seen[a], true)) {
            return shape_err("permute", v.shape(), axes);
        }
        let out = permute_tensor(v, axes);
        Ok(self.push(out, Op::Permute(x, axes.to_vec()), &[x]))
    }

    /// Swaps the two axes of a matrix.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.permute(x, &[1, 0])
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return invalid("concat", "no inputs");
        };
        let base = self.shape(first).to_vec();
        check_axis("concat", &base, axis)?;
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &e)| i != axis && e != base[i]) {
                return shape_err("concat", &base, s);
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let v = self.value(x);
                let blk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * blk..(o + 1) * blk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::Concat(xs.to_vec(), axis), xs))
    }

    /// Rows of `x` (leading axis) at `idx`; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let out = self.value(x).select_rows(idx)?;
        Ok(self.push(out, Op::GatherRows(x, idx.to_vec()), &[x]))
    }

    /// `out[i] = x[i, idx[i]]` for a matrix `x`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if v.rank() != 2 || v.shape()[0] != idx.len() {
            return shape_err("pick", v.shape(), &[idx.len()]);
        }
        let c = v.shape()[1];
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return invalid("pick", format!("index {bad} out of {c} columns"));
        }
        let data = idx.iter().enumerate().map(|(i, &j)| v.data()[i * c + j]).collect();
        let out = Tensor::new([idx.len()], data)?;
        Ok(self.push(out, Op::Pick(x, idx.to_vec()), &[x]))
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta` of that extent.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let v = self.value(x);
        let n = *v.shape().last().unwrap_or(&0);
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return shape_err("layer_norm", v.shape(), self.shape(gamma));
        }
        let eps = T::lit(eps);
        let nf = T::lit(n as f64);
        let rows = v.len() / n.max(1);
        let mut xhat = vec![T::zero(); v.len()];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &v.data()[r * n..(r + 1) * n];
            let mu = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&a| (a - mu) * (a - mu)).sum::<T>() / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for (h, &a) in xhat[r * n..(r + 1) * n].iter_mut().zip(row) {
                *h = (a - mu) * rs;
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let out = xhat.iter().enumerate().map(|(i, &h)| g[i % n] * h + b[i % n]).collect();
        let out = Tensor::new(v.shape().to_vec(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// 2-D convolution of `x: [B, C, H, W]` with `w: [Co, C, k, k]` and optional bias `[Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] {
            return shape_err("conv2d", &sx, &sw);
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return shape_err("conv2d", &sw, self.shape(b));
            }
        }
        let geom = ConvGeom {
            in_channels: sx[1],
            height: sx[2],
            width: sx[3],
            kernel: sw[2],
            stride,
            padding,
        };
        let (Some(ho), Some(wo)) = (
            ConvGeom::out_extent(sx[2], sw[2], stride, padding),
            ConvGeom::out_extent(sx[3], sw[2], stride, padding),
        ) else {
            return shape_err("conv2d", &sx, &sw);
        };
        let (batch, co, plen, npos) = (sx[0], sw[0], geom.patch_len(), ho * wo);
        let img_len = sx[1] * sx[2] * sx[3];
        let mut cols = vec![T::zero(); batch * plen * npos];
        let mut out = vec![T::zero(); batch * co * npos];
        {
            let (vx, vw) = (self.value(x).data(), self.value(w).data());
            for bi in 0..batch {
                let c = &mut cols[bi * plen * npos..(bi + 1) * plen * npos];
                kernels::im2col(&vx[bi * img_len..(bi + 1) * img_len], &geom, c);
                kernels::gemm_nn_acc(vw, c, &mut out[bi * co * npos..(bi + 1) * co * npos], co, plen, npos);
            }
            if let Some(b) = b {
                let vb = self.value(b).data();
                for (i, o) in out.iter_mut().enumerate() {
                    *o = *o + vb[(i / npos) % co];
                }
            }
        }
        let out = Tensor::new([batch, co, ho, wo], out)?;
        let inputs: Vec<Var> = std::iter::once(x).chain(std::iter::once(w)).chain(b).collect();
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                out_channels: co,
                cols,
            },
            &inputs,
        ))
    }

    /// Batch normalization over every axis but the channel axis 1 of
    /// `x: [B, C, ...]`. Training mode also returns the observed statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        mode: NormMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let v = self.value(x);
        let s = v.shape().to_vec();
        if s.len() < 2 || self.shape(gamma) != [s[1]] || self.shape(beta) != [s[1]] {
            return shape_err("batch_norm", &s, self.shape(gamma));
        }
        let (batch, ch) = (s[0], s[1]);
        let spatial: usize = s[2..].iter().product();
        let count = batch * spatial;
        let at = |b: usize, c: usize, p: usize| (b * ch + c) * spatial + p;
        let eps = T::lit(eps);
        let (mean, var_b, stats) = match mode {
            NormMode::Train => {
                if count == 0 {
                    return invalid("batch_norm", "empty batch");
                }
                let cf = T::lit(count as f64);
                let mut mean = vec![T::zero(); ch];
                let mut var = vec![T::zero(); ch];
                for c in 0..ch {
                    let mut acc = T::zero();
                    for b in 0..batch {
                        for p in 0..spatial {
                            acc = acc + v.data()[at(b, c, p)];
                        }
                    }
                    mean[c] = acc / cf;
                    let mut sq = T::zero();
                    for b in 0..batch {
                        for p in 0..spatial {
                            let d = v.data()[at(b, c, p)] - mean[c];
                            sq = sq + d * d;
                        }
                    }
                    var[c] = sq / cf;
                }
                let unbias = if count > 1 {
                    T::lit(count as f64 / (count - 1) as f64)
                } else {
                    T::one()
                };
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.iter().map(|&v| v * unbias).collect(),
                };
                (mean, var, Some(stats))
            }
            NormMode::Eval { mean, var } => {
                if mean.len() != ch || var.len() != ch {
                    return shape_err("batch_norm", &s, &[mean.len()]);
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let rstd: Vec<T> = var_b.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); v.len()];
        let mut out = vec![T::zero(); v.len()];
        for b in 0..batch {
            for c in 0..ch {
                for p in 0..spatial {
                    let i = at(b, c, p);
                    xhat[i] = (v.data()[i] - mean[c]) * rstd[c];
                    out[i] = g[c] * xhat[i] + bt[c];
                }
            }
        }
        let out = Tensor::new(s, out)?;
        let train = matches!(mode, NormMode::Train);
        let var = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                train,
            },
            &[x, gamma, beta],
        );
        Ok((var, stats))
    }

    /// Average pooling with a square window over `x: [B, C, H, W]` (no padding).
    pub fn avg_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return shape_err("avg_pool2d", &s, &[kernel, kernel]);
        }
        let (Some(ho), Some(wo)) = (
            ConvGeom::out_extent(s[2], kernel, stride, 0),
            ConvGeom::out_extent(s[3], kernel, stride, 0),
        ) else {
            return shape_err("avg_pool2d", &s, &[kernel, kernel]);
        };
        let v = self.value(x).data();
        let scale = T::lit(1.0 / (kernel * kernel) as f64);
        let planes = s[0] * s[1];
        let mut out = vec![T::zero(); planes * ho * wo];
        for pl in 0..planes {
            let src = &v[pl * s[2] * s[3]..(pl + 1) * s[2] * s[3]];
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut acc = T::zero();
                    for di in 0..kernel {
                        for dj in 0..kernel {
                            acc = acc + src[(oi * stride + di) * s[3] + oj * stride + dj];
                        }
                    }
                    out[(pl * ho + oi) * wo + oj] = acc * scale;
                }
            }
        }
        let out = Tensor::new([s[0], s[1], ho, wo], out)?;
        Ok(self.push(out, Op::AvgPool2d { x, kernel, stride }, &[x]))
    }

    /// Pairwise squared Euclidean distances between rows of `a: [n, d]` and `b: [m, d]`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[1] {
            return shape_err("sq_dist", va.shape(), vb.shape());
        }
        let (n, m) = (va.shape()[0], vb.shape()[0]);
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            let ra = va.row(i);
            for j in 0..m {
                let d = ra.iter().zip(vb.row(j)).map(|(&x, &y)| (x - y) * (x - y)).sum();
                out.push(d);
            }
        }
        let out = Tensor::new([n, m], out)?;
        Ok(self.push(out, Op::SqDist(a, b), &[a, b]))
    }

    /// Euclidean norm of every row of a matrix. The adjoint at a zero row is zero.
    pub fn row_norm(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.rank() != 2 {
            return invalid("row_norm", format!("expected rank 2, got {:?}", v.shape()));
        }
        let data = v.rows().map(|r| r.iter().map(|&a| a * a).sum::<T>().sqrt()).collect();
        let out = Tensor::new([v.shape()[0]], data)?;
        Ok(self.push(out, Op::RowNorm(x), &[x]))
    }

    /// Fully connected layer: `x · w + b` for `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_bcast(h, b)
    }
}

pub(crate) fn permute_tensor<T: Real>(v: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let shape = v.shape();
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(v.len());
    let mut idx = vec![0usize; rank];
    let src = v.data();
    for _ in 0..v.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(src[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, out).expect("permutation preserves size")
}

/// GELU value and derivative at `x`.
pub(crate) fn gelu_parts<T: Real>(x: T) -> (T, T) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    let du = c * (T::one() + T::lit(3.0) * a * x * x);
    (half * x * (T::one() + t), half * (T::one() + t) + half * x * (T::one() - t * t) * du)
}
