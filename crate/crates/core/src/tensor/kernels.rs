//! Raw numeric kernels over contiguous buffers. These carry no autodiff
//! bookkeeping; the graph operators compose them into forward/backward pairs.

use super::{gemm, Real};
use crate::error::{shape_err, Result};

/// Output extent of a strided, zero-padded window scan (floor convention).
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return shape_err("convolution stride must be positive");
    }
    if input + 2 * pad < kernel {
        return shape_err(format!(
            "kernel {kernel} larger than padded input {} (input {input}, pad {pad})",
            input + 2 * pad
        ));
    }
    Ok((input + 2 * pad - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(c_in: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        Ok(ConvGeom {
            c_in,
            h,
            w,
            k,
            stride,
            pad,
            h_out: conv_out_dim(h, k, stride, pad)?,
            w_out: conv_out_dim(w, k, stride, pad)?,
        })
    }

    /// True when the column matrix is the input itself.
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Output columns `ox` whose input column `ox·s + kx − p` lies in `[0, w)`.
#[inline]
fn valid_span(w: usize, w_out: usize, kx: usize, s: usize, p: usize) -> std::ops::Range<usize> {
    let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
    let hi = if w + p > kx { ((w + p - kx - 1) / s + 1).min(w_out) } else { 0 };
    lo.min(hi)..hi
}

/// Unfolds `x[C×H×W]` into `[C·k·k × H'·W']`.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (k, s, p) = (g.k, g.stride, g.pad);
    let plane_out = g.col_cols();
    let mut cols = vec![T::zero(); g.col_rows() * plane_out];
    for c in 0..g.c_in {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * plane_out..(row + 1) * plane_out];
                let span = valid_span(g.w, g.w_out, kx, s, p);
                for oy in valid_span(g.h, g.h_out, ky, s, p) {
                    let iy = oy * s + ky - p;
                    let src_row = &xc[iy * g.w..(iy + 1) * g.w];
                    let dst_row = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if s == 1 {
                        let i0 = span.start + kx - p;
                        dst_row[span.clone()].copy_from_slice(&src_row[i0..i0 + span.len()]);
                    } else {
                        for ox in span.clone() {
                            dst_row[ox] = src_row[ox * s + kx - p];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds column gradients back onto `[C×H×W]`.
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let (k, s, p) = (g.k, g.stride, g.pad);
    let plane_out = g.col_cols();
    let mut x = vec![T::zero(); g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        let xc = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * plane_out..(row + 1) * plane_out];
                let span = valid_span(g.w, g.w_out, kx, s, p);
                for oy in valid_span(g.h, g.h_out, ky, s, p) {
                    let iy = oy * s + ky - p;
                    let dst_row = &mut xc[iy * g.w..(iy + 1) * g.w];
                    let src_row = &src[oy * g.w_out..(oy + 1) * g.w_out];
                    if s == 1 {
                        let i0 = span.start + kx - p;
                        for (d, &v) in dst_row[i0..i0 + span.len()].iter_mut().zip(&src_row[span.clone()]) {
                            *d += v;
                        }
                    } else {
                        for ox in span.clone() {
                            dst_row[ox * s + kx - p] += src_row[ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Cross-correlation `out[C_out×H'×W'] = w ⋆ x + b`.
pub fn conv2d_forward<T: Real>(x: &[T], w: &[T], b: &[T], c_out: usize, g: &ConvGeom) -> Vec<T> {
    let cols = (!g.is_pointwise()).then(|| im2col(x, g));
    conv2d_forward_cols(x, cols.as_deref(), w, b, c_out, g)
}

/// [`conv2d_forward`] with the unfolded input precomputed (`None` for
/// pointwise geometry).
pub fn conv2d_forward_cols<T: Real>(x: &[T], cols: Option<&[T]>, w: &[T], b: &[T], c_out: usize, g: &ConvGeom) -> Vec<T> {
    let n = g.col_cols();
    let mut out = vec![T::zero(); c_out * n];
    for (o, &bias) in b.iter().enumerate() {
        out[o * n..(o + 1) * n].fill(bias);
    }
    let rhs = cols.unwrap_or(x);
    gemm(c_out, g.col_rows(), n, w, false, rhs, false, T::one(), &mut out);
    out
}

/// Gradients of [`conv2d_forward`] with respect to input, weight and bias.
pub fn conv2d_backward<T: Real>(
    x: &[T],
    w: &[T],
    grad_out: &[T],
    c_out: usize,
    g: &ConvGeom,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cols = (!g.is_pointwise()).then(|| im2col(x, g));
    let (gx, gw, gb) = conv2d_backward_cols(x, cols.as_deref(), w, grad_out, c_out, g, true);
    (gx.unwrap(), gw, gb)
}

/// [`conv2d_backward`] reusing the unfolded input; the input gradient is
/// skipped unless `need_x`.
pub fn conv2d_backward_cols<T: Real>(
    x: &[T],
    cols: Option<&[T]>,
    w: &[T],
    grad_out: &[T],
    c_out: usize,
    g: &ConvGeom,
    need_x: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let n = g.col_cols();
    let rows = g.col_rows();
    let grad_b: Vec<T> = (0..c_out).map(|o| grad_out[o * n..(o + 1) * n].iter().copied().sum()).collect();
    let mut grad_w = vec![T::zero(); c_out * rows];
    gemm(c_out, n, rows, grad_out, false, cols.unwrap_or(x), true, T::zero(), &mut grad_w);
    let grad_x = need_x.then(|| {
        let mut grad_cols = vec![T::zero(); rows * n];
        gemm(rows, c_out, n, w, true, grad_out, false, T::zero(), &mut grad_cols);
        if g.is_pointwise() {
            grad_cols
        } else {
            col2im(&grad_cols, g)
        }
    });
    (grad_x, grad_w, grad_b)
}

/// Transpose of a row-major `rows×cols` matrix.
pub fn transpose<T: Real>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Value of plane `grid[h×w]` at integer `(x, y)`, zero outside.
#[inline]
pub fn texel<T: Real>(grid: &[T], h: usize, w: usize, x: isize, y: isize) -> T {
    if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
        T::zero()
    } else {
        grid[y as usize * w + x as usize]
    }
}

/// The four bilinear taps around `(x, y)`: `(ix, iy, weight)` with the
/// floor corner first. Pixel centers sit at integer coordinates.
#[inline]
pub fn bilinear_taps<T: Real>(x: T, y: T) -> [(isize, isize, T); 4] {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (ix, iy) = (x0.to_isize().unwrap_or(isize::MIN / 2), y0.to_isize().unwrap_or(isize::MIN / 2));
    let one = T::one();
    [
        (ix, iy, (one - fx) * (one - fy)),
        (ix + 1, iy, fx * (one - fy)),
        (ix, iy + 1, (one - fx) * fy),
        (ix + 1, iy + 1, fx * fy),
    ]
}

/// Bilinear lookup with zero padding outside the plane.
#[inline]
pub fn sample_zero<T: Real>(grid: &[T], h: usize, w: usize, x: T, y: T) -> T {
    if !x.is_finite() || !y.is_finite() {
        return T::zero();
    }
    bilinear_taps(x, y)
        .iter()
        .map(|&(ix, iy, wt)| if wt == T::zero() { T::zero() } else { wt * texel(grid, h, w, ix, iy) })
        .sum()
}

/// Bilinear lookup with coordinates clamped to the plane (edge replication).
#[inline]
pub fn sample_clamped<T: Real>(grid: &[T], h: usize, w: usize, x: T, y: T) -> T {
    let xmax = T::from_usize(w - 1).unwrap();
    let ymax = T::from_usize(h - 1).unwrap();
    let x = x.max(T::zero()).min(xmax);
    let y = y.max(T::zero()).min(ymax);
    bilinear_taps(x, y)
        .iter()
        .map(|&(ix, iy, wt)| {
            let ix = ix.clamp(0, w as isize - 1);
            let iy = iy.clamp(0, h as isize - 1);
            wt * grid[iy as usize * w + ix as usize]
        })
        .sum()
}

/// 2× average pooling over the trailing two dims of `[C×H×W]` (floor size).
pub fn avg_pool2<T: Real>(x: &[T], c: usize, h: usize, w: usize) -> (Vec<T>, usize, usize) {
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut out = vec![T::zero(); c * ho * wo];
    for ci in 0..c {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        let dst = &mut out[ci * ho * wo..(ci + 1) * ho * wo];
        for y in 0..ho {
            let r0 = &src[2 * y * w..2 * y * w + w];
            let r1 = &src[(2 * y + 1) * w..(2 * y + 1) * w + w];
            for xo in 0..wo {
                dst[y * wo + xo] = (r0[2 * xo] + r0[2 * xo + 1] + r1[2 * xo] + r1[2 * xo + 1]) * quarter;
            }
        }
    }
    (out, ho, wo)
}
