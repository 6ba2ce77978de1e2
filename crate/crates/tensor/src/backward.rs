//! Adjoint rules, one arm per primitive.

use crate::kernels::{self, split_axis};
use crate::ops::permute_tensor;
use crate::real::Real;
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

impl<T: Real> Tape<T> {
    pub(crate) fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_scaled(grads, *a, gd, T::one());
                self.acc_scaled(grads, *b, gd, T::one());
            }
            Op::Sub(a, b) => {
                self.acc_scaled(grads, *a, gd, T::one());
                self.acc_scaled(grads, *b, gd, -T::one());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(s) = self.slot(grads, *a) {
                    for ((o, &gv), &y) in s.iter_mut().zip(gd).zip(vb) {
                        *o = *o + gv * y;
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    for ((o, &gv), &x) in s.iter_mut().zip(gd).zip(va) {
                        *o = *o + gv * x;
                    }
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(s) = self.slot(grads, *a) {
                    for ((o, &gv), &y) in s.iter_mut().zip(gd).zip(vb) {
                        *o = *o + gv / y;
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    for (((o, &gv), &x), &y) in s.iter_mut().zip(gd).zip(va).zip(vb) {
                        *o = *o - gv * x / (y * y);
                    }
                }
            }
            Op::AddBcast(x, y) => {
                self.acc_scaled(grads, *x, gd, T::one());
                if let Some(s) = self.slot(grads, *y) {
                    let w = s.len().max(1);
                    for (k, &gv) in gd.iter().enumerate() {
                        s[k % w] = s[k % w] + gv;
                    }
                }
            }
            Op::MulBcast(x, y) => {
                let (vx, vy) = (self.value(*x).data(), self.value(*y).data());
                let w = vy.len().max(1);
                if let Some(s) = self.slot(grads, *x) {
                    for (k, (o, &gv)) in s.iter_mut().zip(gd).enumerate() {
                        *o = *o + gv * vy[k % w];
                    }
                }
                if let Some(s) = self.slot(grads, *y) {
                    for (k, (&gv, &xv)) in gd.iter().zip(vx).enumerate() {
                        s[k % w] = s[k % w] + gv * xv;
                    }
                }
            }
            Op::Scale(x, c) => self.acc_scaled(grads, *x, gd, *c),
            Op::AddScalar(x) => self.acc_scaled(grads, *x, gd, T::one()),
            Op::Exp(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    for ((o, &gv), &y) in s.iter_mut().zip(gd).zip(out.data()) {
                        *o = *o + gv * y;
                    }
                }
            }
            Op::Log(x) => {
                let vx = self.value(*x).data();
                if let Some(s) = self.slot(grads, *x) {
                    for ((o, &gv), &xv) in s.iter_mut().zip(gd).zip(vx) {
                        *o = *o + gv / xv;
                    }
                }
            }
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                if let Some(s) = self.slot(grads, *x) {
                    for ((o, &gv), &xv) in s.iter_mut().zip(gd).zip(vx) {
                        if xv > T::zero() {
                            *o = *o + gv;
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let vx = self.value(*x).data();
                if let Some(s) = self.slot(grads, *x) {
                    for ((o, &gv), &xv) in s.iter_mut().zip(gd).zip(vx) {
                        *o = *o + gv * crate::ops::gelu_parts(xv).1;
                    }
                }
            }
            Op::Sum(x) => {
                let gv = gd[0];
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().for_each(|o| *o = *o + gv);
                }
            }
            Op::Mean(x) => {
                let n = T::lit(self.value(*x).len().max(1) as f64);
                let gv = gd[0] / n;
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().for_each(|o| *o = *o + gv);
                }
            }
            Op::SumAxis(x, axis) => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                if let Some(s) = self.slot(grads, *x) {
                    for o in 0..outer {
                        for t in 0..n {
                            for j in 0..inner {
                                let k = (o * n + t) * inner + j;
                                s[k] = s[k] + gd[o * inner + j];
                            }
                        }
                    }
                }
            }
            Op::Softmax(x, axis) => {
                let (outer, n, inner) = split_axis(out.shape(), *axis);
                let y = out.data();
                if let Some(s) = self.slot(grads, *x) {
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |t: usize| (o * n + t) * inner + j;
                            let dot: T = (0..n).map(|t| gd[at(t)] * y[at(t)]).sum();
                            for t in 0..n {
                                s[at(t)] = s[at(t)] + y[at(t)] * (gd[at(t)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax(x, axis) => {
                let (outer, n, inner) = split_axis(out.shape(), *axis);
                let y = out.data();
                if let Some(s) = self.slot(grads, *x) {
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |t: usize| (o * n + t) * inner + j;
                            let gsum: T = (0..n).map(|t| gd[at(t)]).sum();
                            for t in 0..n {
                                s[at(t)] = s[at(t)] + gd[at(t)] - y[at(t)].exp() * gsum;
                            }
                        }
                    }
                }
            }
            Op::Bmm {
                a,
                b,
                trans_b,
                groups,
                m,
                k,
                n,
            } => self.bmm_backward(grads, gd, *a, *b, *trans_b, *groups, *m, *k, *n),
            Op::Reshape(x) => self.acc_scaled(grads, *x, gd, T::one()),
            Op::Permute(x, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                let back = permute_tensor(g, &inv);
                self.acc_scaled(grads, *x, back.data(), T::one());
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for &x in xs {
                    let len = self.shape(x)[*axis];
                    if let Some(s) = self.slot(grads, x) {
                        for o in 0..outer {
                            let src = &gd[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            let dst = &mut s[o * len * inner..(o + 1) * len * inner];
                            for (d, &v) in dst.iter_mut().zip(src) {
                                *d = *d + v;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::GatherRows(x, idx) => {
                let w: usize = self.shape(*x)[1..].iter().product();
                if let Some(s) = self.slot(grads, *x) {
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..w {
                            s[src * w + j] = s[src * w + j] + gd[r * w + j];
                        }
                    }
                }
            }
            Op::Pick(x, idx) => {
                let c = self.shape(*x)[1];
                if let Some(s) = self.slot(grads, *x) {
                    for (r, &j) in idx.iter().enumerate() {
                        s[r * c + j] = s[r * c + j] + gd[r];
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = self.shape(*gamma)[0];
                let gam = self.value(*gamma).data();
                if let Some(s) = self.slot(grads, *gamma) {
                    for (k, (&gv, &h)) in gd.iter().zip(xhat).enumerate() {
                        s[k % n] = s[k % n] + gv * h;
                    }
                }
                if let Some(s) = self.slot(grads, *beta) {
                    for (k, &gv) in gd.iter().enumerate() {
                        s[k % n] = s[k % n] + gv;
                    }
                }
                if let Some(s) = self.slot(grads, *x) {
                    let nf = T::lit(n as f64);
                    for (r, &rs) in rstd.iter().enumerate() {
                        let range = r * n..(r + 1) * n;
                        let gh: Vec<T> = gd[range.clone()].iter().zip(gam).map(|(&a, &b)| a * b).collect();
                        let sum_gh: T = gh.iter().copied().sum();
                        let sum_ghh: T = gh.iter().zip(&xhat[range.clone()]).map(|(&a, &b)| a * b).sum();
                        for (t, k) in range.enumerate() {
                            s[k] = s[k] + rs / nf * (nf * gh[t] - sum_gh - xhat[k] * sum_ghh);
                        }
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                out_channels,
                cols,
            } => {
                let co = *out_channels;
                let (ho, wo) = geom.out_hw();
                let (npos, plen) = (ho * wo, geom.patch_len());
                let batch = self.shape(*x)[0];
                let img_len = geom.in_channels * geom.height * geom.width;
                if let Some(bv) = b {
                    if let Some(s) = self.slot(grads, *bv) {
                        for (k, &gv) in gd.iter().enumerate() {
                            s[(k / npos) % co] = s[(k / npos) % co] + gv;
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *w) {
                    for bi in 0..batch {
                        let gb = &gd[bi * co * npos..(bi + 1) * co * npos];
                        let cb = &cols[bi * plen * npos..(bi + 1) * plen * npos];
                        kernels::gemm_nt_acc(gb, cb, s, co, npos, plen);
                    }
                }
                let wv = self.value(*w).data();
                if let Some(s) = self.slot(grads, *x) {
                    let mut gcols = vec![T::zero(); plen * npos];
                    for bi in 0..batch {
                        gcols.iter_mut().for_each(|v| *v = T::zero());
                        let gb = &gd[bi * co * npos..(bi + 1) * co * npos];
                        kernels::gemm_tn_acc(wv, gb, &mut gcols, plen, co, npos);
                        kernels::col2im_acc(&gcols, geom, &mut s[bi * img_len..(bi + 1) * img_len]);
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                train,
            } => {
                let shape = self.shape(*x);
                let (batch, ch) = (shape[0], shape[1]);
                let spatial: usize = shape[2..].iter().product();
                let chan = |k: usize| (k / spatial) % ch;
                let gam = self.value(*gamma).data();
                if let Some(s) = self.slot(grads, *gamma) {
                    for (k, (&gv, &h)) in gd.iter().zip(xhat).enumerate() {
                        s[chan(k)] = s[chan(k)] + gv * h;
                    }
                }
                if let Some(s) = self.slot(grads, *beta) {
                    for (k, &gv) in gd.iter().enumerate() {
                        s[chan(k)] = s[chan(k)] + gv;
                    }
                }
                if let Some(s) = self.slot(grads, *x) {
                    if *train {
                        let count = T::lit((batch * spatial) as f64);
                        let mut sum_gh = vec![T::zero(); ch];
                        let mut sum_ghh = vec![T::zero(); ch];
                        for (k, (&gv, &h)) in gd.iter().zip(xhat).enumerate() {
                            let c = chan(k);
                            sum_gh[c] = sum_gh[c] + gv * gam[c];
                            sum_ghh[c] = sum_ghh[c] + gv * gam[c] * h;
                        }
                        for (k, (&gv, &h)) in gd.iter().zip(xhat).enumerate() {
                            let c = chan(k);
                            s[k] = s[k] + rstd[c] / count * (count * gv * gam[c] - sum_gh[c] - h * sum_ghh[c]);
                        }
                    } else {
                        for (k, &gv) in gd.iter().enumerate() {
                            let c = chan(k);
                            s[k] = s[k] + gv * gam[c] * rstd[c];
                        }
                    }
                }
            }
            Op::AvgPool2d { x, kernel, stride } => {
                let sx = self.shape(*x);
                let (h, wd) = (sx[2], sx[3]);
                let (ho, wo) = (out.shape()[2], out.shape()[3]);
                let planes = sx[0] * sx[1];
                let scale = T::lit(1.0 / (kernel * kernel) as f64);
                if let Some(s) = self.slot(grads, *x) {
                    for pl in 0..planes {
                        for oi in 0..ho {
                            for oj in 0..wo {
                                let gv = gd[(pl * ho + oi) * wo + oj] * scale;
                                for di in 0..*kernel {
                                    for dj in 0..*kernel {
                                        let k = pl * h * wd + (oi * stride + di) * wd + oj * stride + dj;
                                        s[k] = s[k] + gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::SqDist(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (n, m, d) = (va.shape()[0], vb.shape()[0], va.shape()[1]);
                let two = T::lit(2.0);
                if let Some(s) = self.slot(grads, *a) {
                    for i in 0..n {
                        for j in 0..m {
                            let gv = two * gd[i * m + j];
                            for t in 0..d {
                                s[i * d + t] = s[i * d + t] + gv * (va.data()[i * d + t] - vb.data()[j * d + t]);
                            }
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    for i in 0..n {
                        for j in 0..m {
                            let gv = two * gd[i * m + j];
                            for t in 0..d {
                                s[j * d + t] = s[j * d + t] + gv * (vb.data()[j * d + t] - va.data()[i * d + t]);
                            }
                        }
                    }
                }
            }
            Op::RowNorm(x) => {
                let vx = self.value(*x);
                let d = vx.shape()[1];
                if let Some(s) = self.slot(grads, *x) {
                    for (r, &norm) in out.data().iter().enumerate() {
                        if norm > T::zero() {
                            let c = gd[r] / norm;
                            for t in 0..d {
                                s[r * d + t] = s[r * d + t] + c * vx.data()[r * d + t];
                            }
                        }
                    }
                }
            }
        }
    }

    fn acc_scaled(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: &[T], c: T) {
        if let Some(s) = self.slot(grads, v) {
            for (o, &gv) in s.iter_mut().zip(g) {
                *o = *o + c * gv;
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn bmm_backward(
        &self,
        grads: &mut [Option<Tensor<T>>],
        gd: &[T],
        a: Var,
        b: Var,
        trans_b: bool,
        groups: usize,
        m: usize,
        k: usize,
        n: usize,
    ) {
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        if let Some(s) = self.slot(grads, a) {
            for g in 0..groups {
                let go = &gd[g * m * n..(g + 1) * m * n];
                let bg = &vb[g * k * n..(g + 1) * k * n];
                let sa = &mut s[g * m * k..(g + 1) * m * k];
                if trans_b {
                    // out = a·bᵀ, b: n×k  →  ∂a = g·b
                    kernels::gemm_nn_acc(go, bg, sa, m, n, k);
                } else {
                    // out = a·b, b: k×n  →  ∂a = g·bᵀ
                    kernels::gemm_nt_acc(go, bg, sa, m, n, k);
                }
            }
        }
        if let Some(s) = self.slot(grads, b) {
            for g in 0..groups {
                let go = &gd[g * m * n..(g + 1) * m * n];
                let ag = &va[g * m * k..(g + 1) * m * k];
                let sb = &mut s[g * k * n..(g + 1) * k * n];
                if trans_b {
                    // ∂b = gᵀ·a  (n×k)
                    kernels::gemm_tn_acc(go, ag, sb, n, m, k);
                } else {
                    // ∂b = aᵀ·g  (k×n)
                    kernels::gemm_tn_acc(ag, go, sb, k, m, n);
                }
            }
        }
    }
}
