//! Dense numeric kernels shared by the graph ops.
//!
//! Row-level products accumulate in the storage type; sums across samples
//! (weight gradients) accumulate in `f64`.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::Real;

/// Dot product with sixteen independent partial sums combined in a fixed order.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [T::ZERO; 16];
    let ca = a.chunks_exact(16);
    let cb = b.chunks_exact(16);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..16 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x.to_f64() * y.to_f64();
    }
    let mut half = [0.0f64; 8];
    for l in 0..8 {
        half[l] = lanes[l].to_f64() + lanes[l + 8].to_f64();
    }
    ((half[0] + half[4]) + (half[1] + half[5])) + ((half[2] + half[6]) + (half[3] + half[7])) + tail
}

#[inline]
fn axpy<T: Real>(alpha: f64, x: &[T], acc: &mut [f64]) {
    for (a, &v) in acc.iter_mut().zip(x) {
        *a += alpha * v.to_f64();
    }
}

/// `out[m×n] = a[m×k] · b[k×n]`, accumulated in the storage type.
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        orow.iter_mut().for_each(|v| *v = T::ZERO);
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == T::ZERO {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

/// `acc[k×n] += a[m×k]ᵀ · b[m×n]`.
pub fn matmul_at_acc<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, acc: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(acc.len(), k * n);
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == T::ZERO {
                continue;
            }
            axpy(av.to_f64(), brow, &mut acc[p * n..(p + 1) * n]);
        }
    }
}

/// `acc[m×n] += a[m×k] · b[n×k]ᵀ`.
pub fn matmul_bt_acc<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, acc: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(acc.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            acc[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

pub fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Geometry of a 2-D convolution over one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kw) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Unfolds one `C×H×W` sample into a `(C·kh·kw) × (H'·W')` column matrix.
pub fn im2col<T: Real>(input: &[T], g: &ConvGeom, cols: &mut [T]) {
    debug_assert_eq!(cols.len(), g.patch_len() * g.out_len());
    im2col_at(input, g, cols, g.out_len(), 0);
}

/// Unfolds a batch of `C×H×W` samples into one `(C·kh·kw) × (B·H'·W')`
/// matrix; sample `n` occupies columns `n·H'W' .. (n+1)·H'W'`.
pub fn im2col_batch<T: Real>(input: &[T], batch: usize, g: &ConvGeom, cols: &mut [T]) {
    let (sample, hw) = (g.channels * g.height * g.width, g.out_len());
    debug_assert_eq!(cols.len(), g.patch_len() * batch * hw);
    for n in 0..batch {
        im2col_at(&input[n * sample..(n + 1) * sample], g, cols, batch * hw, n * hw);
    }
}

/// Writes the columns of one sample into rows of stride `ld` starting at `off`.
fn im2col_at<T: Real>(input: &[T], g: &ConvGeom, cols: &mut [T], ld: usize, off: usize) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let hw = oh * ow;
    for c in 0..g.channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ld + off..row * ld + off + hw];
                let (lo, hi) = valid_range(kj, g.pad, g.stride, g.width, ow);
                for oy in 0..oh {
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.height || lo >= hi {
                        drow.iter_mut().for_each(|v| *v = T::ZERO);
                        continue;
                    }
                    let srow = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    drow[..lo].iter_mut().for_each(|v| *v = T::ZERO);
                    drow[hi..].iter_mut().for_each(|v| *v = T::ZERO);
                    let x0 = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        drow[lo..hi].copy_from_slice(&srow[x0..x0 + hi - lo]);
                    } else {
                        for (i, d) in drow[lo..hi].iter_mut().enumerate() {
                            *d = srow[x0 + i * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `lo..hi` whose input column `ox·stride + k − pad` lies in `0..width`.
fn valid_range(k: usize, pad: usize, stride: usize, width: usize, ow: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if width + pad > k {
        (width + pad - k).div_ceil(stride).min(ow)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Folds a column matrix back onto a `C×H×W` gradient, summing overlaps.
pub fn col2im_acc<T: Real>(cols: &[T], g: &ConvGeom, grad: &mut [f64]) {
    col2im_at(cols, g, grad, g.out_len(), 0);
}

/// Inverse of [`im2col_batch`]: folds `(C·kh·kw) × (B·H'·W')` columns onto a
/// `B×C×H×W` gradient.
pub fn col2im_batch<T: Real>(cols: &[T], batch: usize, g: &ConvGeom, grad: &mut [f64]) {
    let (sample, hw) = (g.channels * g.height * g.width, g.out_len());
    debug_assert_eq!(grad.len(), batch * sample);
    for n in 0..batch {
        col2im_at(cols, g, &mut grad[n * sample..(n + 1) * sample], batch * hw, n * hw);
    }
}

fn col2im_at<T: Real>(cols: &[T], g: &ConvGeom, grad: &mut [f64], ld: usize, off: usize) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let hw = oh * ow;
    for c in 0..g.channels {
        let plane = &mut grad[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ld + off..row * ld + off + hw];
                let (lo, hi) = valid_range(kj, g.pad, g.stride, g.width, ow);
                if lo >= hi {
                    continue;
                }
                let x0 = lo * g.stride + kj - g.pad;
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.height {
                        continue;
                    }
                    let prow = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let srow = &src[oy * ow + lo..oy * ow + hi];
                    for (i, &v) in srow.iter().enumerate() {
                        prow[x0 + i * g.stride] += v.to_f64();
                    }
                }
            }
        }
    }
}
