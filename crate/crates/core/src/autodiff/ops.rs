//! Differentiable operators. Each builds its forward value eagerly and, when
//! any input is tracked, records the matching vector-Jacobian product.

use std::rc::Rc;

use super::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::kernels::{self, ConvGeom};
use crate::tensor::{gemm, Real, Tensor};

impl<T: Real> Graph<T> {
    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return shape_err(format!("{op}: shapes {sa:?} and {sb:?} differ"));
        }
        Ok(())
    }

    fn unary(&self, a: Var, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var {
        let x = self.value(a);
        let y = Rc::new(x.map(f));
        let yc = Rc::clone(&y);
        self.push_rc(y, &[a], move |g| {
            let data = x.data().iter().zip(yc.data()).zip(g.data()).map(|((&xi, &yi), &gi)| gi * df(xi, yi)).collect();
            vec![Some(Tensor::new(x.shape().to_vec(), data).unwrap())]
        })
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip_map(&self.value(b), |x, y| x + y)?;
        Ok(self.push(v, &[a, b], |g| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).zip_map(&self.value(b), |x, y| x - y)?;
        Ok(self.push(v, &[a, b], |g| vec![Some(g.clone()), Some(g.map(|x| -x))]))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (va, vb) = (self.value(a), self.value(b));
        let v = va.zip_map(&vb, |x, y| x * y)?;
        Ok(self.push(v, &[a, b], move |g| {
            vec![Some(g.zip_map(&vb, |g, y| g * y).unwrap()), Some(g.zip_map(&va, |g, x| g * x).unwrap())]
        }))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let s = T::lit(s);
        let v = self.value(a).map(|x| x * s);
        self.push(v, &[a], move |g| vec![Some(g.map(|x| x * s))])
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Var {
        let s = T::lit(s);
        let v = self.value(a).map(|x| x + s);
        self.push(v, &[a], |g| vec![Some(g.clone())])
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |x| x.max(T::zero()), |x, _| if x > T::zero() { T::one() } else { T::zero() })
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), |_, y| y)
    }

    /// `|x|`, with subgradient 0 at the origin.
    pub fn abs(&self, a: Var) -> Var {
        self.unary(a, |x| x.abs(), |x, _| x.signum() * if x == T::zero() { T::zero() } else { T::one() })
    }

    pub fn sum(&self, a: Var) -> Var {
        let x = self.value(a);
        let shape = x.shape().to_vec();
        self.push(Tensor::scalar(x.sum()), &[a], move |g| vec![Some(Tensor::full(shape.clone(), g.item()))])
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).numel().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let x = self.value(a);
        let from = x.shape().to_vec();
        let v = (*x).clone().reshape(shape)?;
        Ok(self.push(v, &[a], move |g| vec![Some(g.clone().reshape(from.clone()).unwrap())]))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let values: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let tail = values[0].shape()[1..].to_vec();
        let mut lead = 0;
        for v in &values {
            if v.ndim() == 0 || v.shape()[1..] != tail[..] {
                return shape_err(format!("concat: {:?} incompatible with trailing dims {:?}", v.shape(), tail));
            }
            lead += v.shape()[0];
        }
        let mut data = Vec::with_capacity(values.iter().map(|v| v.numel()).sum());
        values.iter().for_each(|v| data.extend_from_slice(v.data()));
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let sizes: Vec<(Vec<usize>, usize)> = values.iter().map(|v| (v.shape().to_vec(), v.numel())).collect();
        Ok(self.push(Tensor::new(shape, data)?, parts, move |g| {
            let mut off = 0;
            sizes
                .iter()
                .map(|(s, n)| {
                    let t = Tensor::new(s.clone(), g.data()[off..off + n].to_vec()).unwrap();
                    off += n;
                    Some(t)
                })
                .collect()
        }))
    }

    /// Rows `start..end` of the leading axis.
    pub fn slice0(&self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        if x.ndim() == 0 || start > end || end > x.shape()[0] {
            return shape_err(format!("slice0 {start}..{end} of {:?}", x.shape()));
        }
        let inner: usize = x.shape()[1..].iter().product();
        let mut shape = x.shape().to_vec();
        shape[0] = end - start;
        let v = Tensor::new(shape, x.data()[start * inner..end * inner].to_vec())?;
        let full = x.shape().to_vec();
        Ok(self.push(v, &[a], move |g| {
            let mut out = Tensor::zeros(full.clone());
            out.data_mut()[start * inner..end * inner].copy_from_slice(g.data());
            vec![Some(out)]
        }))
    }

    pub fn transpose2d(&self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.ndim() != 2 {
            return shape_err(format!("transpose2d needs a matrix, got {:?}", x.shape()));
        }
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let v = Tensor::new([c, r], kernels::transpose(x.data(), r, c))?;
        Ok(self.push(v, &[a], move |g| vec![Some(Tensor::new([r, c], kernels::transpose(g.data(), c, r)).unwrap())]))
    }

    /// Matrix product of `[m×k]` and `[k×n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ndim() != 2 || vb.ndim() != 2 || va.shape()[1] != vb.shape()[0] {
            return shape_err(format!("matmul: cannot multiply {:?} by {:?}", va.shape(), vb.shape()));
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, va.data(), false, vb.data(), false, T::zero(), &mut out);
        Ok(self.push(Tensor::new([m, n], out)?, &[a, b], move |g| {
            let mut ga = vec![T::zero(); m * k];
            gemm(m, n, k, g.data(), false, vb.data(), true, T::zero(), &mut ga);
            let mut gb = vec![T::zero(); k * n];
            gemm(k, m, n, va.data(), true, g.data(), false, T::zero(), &mut gb);
            vec![Some(Tensor::new([m, k], ga).unwrap()), Some(Tensor::new([k, n], gb).unwrap())]
        }))
    }

    /// Softmax over the last axis, stabilized by max subtraction.
    pub fn softmax_lastdim(&self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.ndim() == 0 || x.shape()[x.ndim() - 1] == 0 {
            return shape_err(format!("softmax over empty last axis {:?}", x.shape()));
        }
        if !x.is_finite() {
            return Err(Error::Domain("softmax input contains non-finite values".into()));
        }
        let n = x.shape()[x.ndim() - 1];
        let mut y = vec![T::zero(); x.numel()];
        for (src, dst) in x.data().chunks_exact(n).zip(y.chunks_exact_mut(n)) {
            let m = src.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - m).exp();
                z += *d;
            }
            dst.iter_mut().for_each(|d| *d /= z);
        }
        let y = Rc::new(Tensor::new(x.shape().to_vec(), y)?);
        let yc = Rc::clone(&y);
        Ok(self.push_rc(y, &[a], move |g| {
            let mut gx = vec![T::zero(); yc.numel()];
            for ((ys, gs), out) in yc.data().chunks_exact(n).zip(g.data().chunks_exact(n)).zip(gx.chunks_exact_mut(n)) {
                let dot: T = ys.iter().zip(gs).map(|(&y, &g)| y * g).sum();
                for ((o, &y), &g) in out.iter_mut().zip(ys).zip(gs) {
                    *o = y * (g - dot);
                }
            }
            vec![Some(Tensor::new(yc.shape().to_vec(), gx).unwrap())]
        }))
    }

    /// 2-D cross-correlation of `x[C_in×H×W]` with `w[C_out×C_in×k×k]` plus
    /// bias `b[C_out]`. Output size uses the floor convention.
    pub fn conv2d(&self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        if vx.ndim() != 3 || vw.ndim() != 4 || vb.ndim() != 1 {
            return shape_err(format!(
                "conv2d: expected x[C,H,W], w[O,C,k,k], b[O]; got {:?}, {:?}, {:?}",
                vx.shape(),
                vw.shape(),
                vb.shape()
            ));
        }
        let (c_in, h, wd) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let (c_out, k) = (vw.shape()[0], vw.shape()[2]);
        if vw.shape()[1] != c_in || vw.shape()[3] != k || vb.shape()[0] != c_out {
            return shape_err(format!(
                "conv2d: weight {:?} / bias {:?} do not match input channels {c_in}",
                vw.shape(),
                vb.shape()
            ));
        }
        let geom = ConvGeom::new(c_in, h, wd, k, stride, pad)?;
        let cols = (!geom.is_pointwise()).then(|| kernels::im2col(vx.data(), &geom));
        let out = kernels::conv2d_forward_cols(vx.data(), cols.as_deref(), vw.data(), vb.data(), c_out, &geom);
        let v = Tensor::new([c_out, geom.h_out, geom.w_out], out)?;
        let need_x = self.requires_grad(x);
        Ok(self.push(v, &[x, w, b], move |g| {
            let (gx, gw, gb) =
                kernels::conv2d_backward_cols(vx.data(), cols.as_deref(), vw.data(), g.data(), c_out, &geom, need_x);
            vec![
                gx.map(|gx| Tensor::new(vx.shape().to_vec(), gx).unwrap()),
                Some(Tensor::new(vw.shape().to_vec(), gw).unwrap()),
                Some(Tensor::new(vb.shape().to_vec(), gb).unwrap()),
            ]
        }))
    }

    /// Per-channel normalization over the spatial extent of `[C×H×W]`
    /// (no affine parameters).
    pub fn instance_norm(&self, x: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        if vx.ndim() != 3 {
            return shape_err(format!("instance_norm needs [C,H,W], got {:?}", vx.shape()));
        }
        let c = vx.shape()[0];
        let n = vx.shape()[1] * vx.shape()[2];
        let nf = T::from_usize(n).unwrap();
        let eps = T::lit(eps);
        let mut y = vec![T::zero(); vx.numel()];
        let mut inv_std = vec![T::zero(); c];
        for ci in 0..c {
            let src = &vx.data()[ci * n..(ci + 1) * n];
            let mean = src.iter().copied().sum::<T>() / nf;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[ci] = is;
            for (d, &s) in y[ci * n..(ci + 1) * n].iter_mut().zip(src) {
                *d = (s - mean) * is;
            }
        }
        let y = Rc::new(Tensor::new(vx.shape().to_vec(), y)?);
        let yc = Rc::clone(&y);
        Ok(self.push_rc(y, &[x], move |g| {
            let mut gx = vec![T::zero(); yc.numel()];
            for ci in 0..c {
                let ys = &yc.data()[ci * n..(ci + 1) * n];
                let gs = &g.data()[ci * n..(ci + 1) * n];
                let gmean = gs.iter().copied().sum::<T>() / nf;
                let gy: T = gs.iter().zip(ys).map(|(&g, &y)| g * y).sum::<T>() / nf;
                for ((o, &g), &y) in gx[ci * n..(ci + 1) * n].iter_mut().zip(gs).zip(ys) {
                    *o = inv_std[ci] * (g - gmean - y * gy);
                }
            }
            vec![Some(Tensor::new(yc.shape().to_vec(), gx).unwrap())]
        }))
    }

    /// Samples `grid[C×H×W]` at `coords[2×H'×W']` (channel 0 = x/column,
    /// channel 1 = y/row, pixel centers at integers) with bilinear
    /// interpolation and zero padding. Differentiable in both arguments.
    pub fn bilinear_sample(&self, grid: Var, coords: Var) -> Result<Var> {
        let (vg, vc) = (self.value(grid), self.value(coords));
        if vg.ndim() != 3 || vc.ndim() != 3 || vc.shape()[0] != 2 {
            return shape_err(format!("bilinear_sample: grid {:?}, coords {:?}", vg.shape(), vc.shape()));
        }
        let (c, h, w) = (vg.shape()[0], vg.shape()[1], vg.shape()[2]);
        let (ho, wo) = (vc.shape()[1], vc.shape()[2]);
        let n = ho * wo;
        let mut out = vec![T::zero(); c * n];
        for p in 0..n {
            let (x, y) = (vc.data()[p], vc.data()[n + p]);
            for ci in 0..c {
                out[ci * n + p] = kernels::sample_zero(&vg.data()[ci * h * w..(ci + 1) * h * w], h, w, x, y);
            }
        }
        let v = Tensor::new([c, ho, wo], out)?;
        Ok(self.push(v, &[grid, coords], move |g| {
            let mut gg = vec![T::zero(); c * h * w];
            let mut gc = vec![T::zero(); 2 * n];
            let one = T::one();
            for p in 0..n {
                let (x, y) = (vc.data()[p], vc.data()[n + p]);
                if !x.is_finite() || !y.is_finite() {
                    continue;
                }
                let (x0, y0) = (x.floor(), y.floor());
                let (fx, fy) = (x - x0, y - y0);
                let (ix, iy) = (x0.to_isize().unwrap(), y0.to_isize().unwrap());
                let taps = kernels::bilinear_taps(x, y);
                for ci in 0..c {
                    let go = g.data()[ci * n + p];
                    if go == T::zero() {
                        continue;
                    }
                    let plane = &vg.data()[ci * h * w..(ci + 1) * h * w];
                    for &(tx, ty, wt) in &taps {
                        if tx >= 0 && ty >= 0 && (tx as usize) < w && (ty as usize) < h {
                            gg[ci * h * w + ty as usize * w + tx as usize] += wt * go;
                        }
                    }
                    let v00 = kernels::texel(plane, h, w, ix, iy);
                    let v10 = kernels::texel(plane, h, w, ix + 1, iy);
                    let v01 = kernels::texel(plane, h, w, ix, iy + 1);
                    let v11 = kernels::texel(plane, h, w, ix + 1, iy + 1);
                    gc[p] += go * ((one - fy) * (v10 - v00) + fy * (v11 - v01));
                    gc[n + p] += go * ((one - fx) * (v01 - v00) + fx * (v11 - v10));
                }
            }
            vec![
                Some(Tensor::new([c, h, w], gg).unwrap()),
                Some(Tensor::new([2, ho, wo], gc).unwrap()),
            ]
        }))
    }

    /// 2× average pooling over the trailing two axes of `[C×H×W]`.
    pub fn avg_pool2(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.ndim() != 3 {
            return shape_err(format!("avg_pool2 needs [C,H,W], got {:?}", vx.shape()));
        }
        let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let (out, ho, wo) = kernels::avg_pool2(vx.data(), c, h, w);
        let v = Tensor::new([c, ho, wo], out)?;
        Ok(self.push(v, &[x], move |g| {
            let q = T::lit(0.25);
            let mut gx = vec![T::zero(); c * h * w];
            for ci in 0..c {
                for y in 0..ho {
                    for xo in 0..wo {
                        let gv = g.data()[(ci * ho + y) * wo + xo] * q;
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            gx[(ci * h + 2 * y + dy) * w + 2 * xo + dx] += gv;
                        }
                    }
                }
            }
            vec![Some(Tensor::new([c, h, w], gx).unwrap())]
        }))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against soft targets in
    /// `[0,1]`, with the probability clamped to `[eps, 1-eps]`.
    pub fn bce_with_logits(&self, logits: Var, target: &Tensor<T>, eps: f64) -> Result<Var> {
        let vl = self.value(logits);
        vl.expect_same_shape(target)?;
        let eps = T::lit(eps);
        let one = T::one();
        let n = T::from_usize(vl.numel().max(1)).unwrap();
        let mut total = T::zero();
        for (&l, &t) in vl.data().iter().zip(target.data()) {
            let p = sigmoid(l).max(eps).min(one - eps);
            total -= t * p.ln() + (one - t) * (one - p).ln();
        }
        let target = target.clone();
        Ok(self.push(Tensor::scalar(total / n), &[logits], move |g| {
            let scale = g.item() / n;
            let data = vl
                .data()
                .iter()
                .zip(target.data())
                .map(|(&l, &t)| {
                    let p = sigmoid(l);
                    if p < eps || p > one - eps {
                        T::zero()
                    } else {
                        scale * (p - t)
                    }
                })
                .collect();
            vec![Some(Tensor::new(vl.shape().to_vec(), data).unwrap())]
        }))
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
