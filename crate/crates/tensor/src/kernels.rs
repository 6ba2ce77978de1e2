//! Raw slice kernels shared by the tape and by plain `Tensor` helpers.
//!
//! All reductions run sequentially in a fixed order so results never depend
//! on scheduling.

use crate::real::Real;

/// `out = a · b` with `a: m×k`, `b: k×n` (overwrites `out`).
pub fn gemm<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    out.iter_mut().for_each(|v| *v = T::zero());
    gemm_nn_acc(a, b, out, m, k, n);
}

/// `out += a · b` with `a: m×k`, `b: k×n`.
pub fn gemm_nn_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out += a · bᵀ` with `a: m×k`, `b: n×k`.
pub fn gemm_nt_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s = s + x * y;
            }
            out[i * n + j] = out[i * n + j] + s;
        }
    }
}

/// `out += aᵀ · b` with `a: k×m`, `b: k×n`.
pub fn gemm_tn_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

pub fn transpose<T: Real>(src: &[T], dst: &mut [T], rows: usize, cols: usize) {
    for i in 0..rows {
        for j in 0..cols {
            dst[j * rows + i] = src[i * cols + j];
        }
    }
}

/// Geometry of a square-kernel 2-D convolution over one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    /// `floor((in + 2·pad − kernel)/stride) + 1`, or `None` if the kernel does not fit.
    pub fn out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
        let padded = input + 2 * padding;
        if stride == 0 || padded < kernel {
            return None;
        }
        Some((padded - kernel) / stride + 1)
    }

    pub fn out_hw(&self) -> (usize, usize) {
        (
            Self::out_extent(self.height, self.kernel, self.stride, self.padding).unwrap_or(0),
            Self::out_extent(self.width, self.kernel, self.stride, self.padding).unwrap_or(0),
        )
    }

    /// Rows of the unfolded patch matrix: `in_channels · kernel²`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

/// Unfolds one `C×H×W` image into a `(C·k·k) × (Ho·Wo)` patch matrix.
pub fn im2col<T: Real>(img: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let npos = ho * wo;
    let k = g.kernel;
    for c in 0..g.in_channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                for oi in 0..ho {
                    let y = (oi * g.stride + ki) as isize - g.padding as isize;
                    for oj in 0..wo {
                        let x = (oj * g.stride + kj) as isize - g.padding as isize;
                        let v = if y >= 0 && x >= 0 && (y as usize) < g.height && (x as usize) < g.width {
                            img[(c * g.height + y as usize) * g.width + x as usize]
                        } else {
                            T::zero()
                        };
                        cols[row * npos + oi * wo + oj] = v;
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds a patch matrix back into an image gradient.
pub fn col2im_acc<T: Real>(cols: &[T], g: &ConvGeom, img: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let npos = ho * wo;
    let k = g.kernel;
    for c in 0..g.in_channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                for oi in 0..ho {
                    let y = (oi * g.stride + ki) as isize - g.padding as isize;
                    if y < 0 || y as usize >= g.height {
                        continue;
                    }
                    for oj in 0..wo {
                        let x = (oj * g.stride + kj) as isize - g.padding as isize;
                        if x < 0 || x as usize >= g.width {
                            continue;
                        }
                        let idx = (c * g.height + y as usize) * g.width + x as usize;
                        img[idx] = img[idx] + cols[row * npos + oi * wo + oj];
                    }
                }
            }
        }
    }
}

/// Splits a shape around `axis` into `(outer, axis_len, inner)` strides.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
