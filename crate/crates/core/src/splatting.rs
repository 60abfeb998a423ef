//! Forward warping ("splatting") of feature maps along a flow field.
//!
//! Every source pixel `p` is pushed to `p + flow(p)` and distributed onto the
//! (up to) four surrounding integer targets with the bilinear kernel
//! `b(Δ) = max(0, 1-|Δx|) · max(0, 1-|Δy|)`. Targets outside the grid are
//! dropped. The modes differ only in the per-source multiplier `m(p)` and in
//! whether the scattered sum is normalized by the scattered multiplier mass:
//!
//! | mode        | m(p)            | value              |
//! |-------------|-----------------|--------------------|
//! | Summation   | 1               | Σ b·src            |
//! | Average     | 1               | Σ b·src / Σ b      |
//! | Linear      | vis(p)          | Σ b·m·src / Σ b·m  |
//! | Softmax     | exp(α·vis(p))   | Σ b·m·src / Σ b·m  |
//!
//! Targets whose accumulated mass falls below `eps_hole` are holes: their
//! value is 0 and they are flagged in [`SplatResult::hole_mask`].

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplatMode {
    Summation,
    Average,
    Linear,
    Softmax,
}

impl SplatMode {
    pub const ALL: [SplatMode; 4] = [SplatMode::Summation, SplatMode::Average, SplatMode::Linear, SplatMode::Softmax];

    pub fn name(self) -> &'static str {
        match self {
            SplatMode::Summation => "summation",
            SplatMode::Average => "average",
            SplatMode::Linear => "linear",
            SplatMode::Softmax => "softmax",
        }
    }

    fn normalized(self) -> bool {
        self != SplatMode::Summation
    }
}

impl std::str::FromStr for SplatMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        SplatMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown splat mode `{s}` (expected summation|average|linear|softmax)"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplatConfig {
    pub eps_hole: f64,
    /// Importance scale for softmax splatting: `m = exp(alpha · vis)`.
    pub softmax_alpha: f64,
}

impl Default for SplatConfig {
    fn default() -> Self {
        SplatConfig { eps_hole: 1e-4, softmax_alpha: 10.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplatResult<T: Real = f32> {
    /// `[C×H×W]`, zero at holes.
    pub value: Tensor<T>,
    /// `[1×H×W]` accumulated multiplier mass (the normalizer).
    pub weight: Tensor<T>,
    /// Row-major `H×W`, true where `weight < eps_hole`.
    pub hole_mask: Vec<bool>,
}

/// Gradients of a splat's `value` output.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatGrads<T: Real = f32> {
    pub src: Tensor<T>,
    pub flow: Tensor<T>,
    pub vis: Tensor<T>,
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
}

fn check_inputs<T: Real>(src: &Tensor<T>, flow: &Tensor<T>, vis: Option<&Tensor<T>>) -> Result<Geometry> {
    if src.ndim() != 3 {
        return shape_err(format!("splat source must be [C,H,W], got {:?}", src.shape()));
    }
    let (c, h, w) = (src.dim(0), src.dim(1), src.dim(2));
    if flow.shape() != [2, h, w] {
        return shape_err(format!("splat flow {:?} does not match source {:?}", flow.shape(), src.shape()));
    }
    if let Some(v) = vis {
        if v.shape() != [1, h, w] {
            return shape_err(format!("splat visibility {:?} does not match source {:?}", v.shape(), src.shape()));
        }
    }
    Ok(Geometry { c, h, w })
}

fn multipliers<T: Real>(mode: SplatMode, vis: Option<&Tensor<T>>, n: usize, cfg: &SplatConfig) -> Vec<T> {
    let alpha = T::lit(cfg.softmax_alpha);
    match (mode, vis) {
        (SplatMode::Linear, Some(v)) => v.data().to_vec(),
        (SplatMode::Softmax, Some(v)) => v.data().iter().map(|&x| (alpha * x).exp()).collect(),
        (SplatMode::Softmax, None) => vec![alpha.exp(); n],
        _ => vec![T::one(); n],
    }
}

/// One bilinear corner: target index and kernel factors with their
/// derivatives along x and y (floor corner convention at kinks).
struct Corner<T> {
    target: usize,
    bx: T,
    by: T,
    dbx: T,
    dby: T,
}

fn corners<T: Real>(x: usize, y: usize, fx: T, fy: T, h: usize, w: usize) -> impl Iterator<Item = Corner<T>> {
    let tx = T::from_usize(x).unwrap() + fx;
    let ty = T::from_usize(y).unwrap() + fy;
    let (x0, y0) = (tx.floor(), ty.floor());
    let (ax, ay) = (tx - x0, ty - y0);
    let finite = tx.is_finite() && ty.is_finite();
    let (ix, iy) = if finite { (x0.to_isize().unwrap(), y0.to_isize().unwrap()) } else { (-2, -2) };
    let one = T::one();
    [(0isize, 0isize), (1, 0), (0, 1), (1, 1)].into_iter().filter_map(move |(dx, dy)| {
        let (cx, cy) = (ix + dx, iy + dy);
        if !finite || cx < 0 || cy < 0 || cx >= w as isize || cy >= h as isize {
            return None;
        }
        let (bx, dbx) = if dx == 0 { (one - ax, -one) } else { (ax, one) };
        let (by, dby) = if dy == 0 { (one - ay, -one) } else { (ay, one) };
        Some(Corner { target: cy as usize * w + cx as usize, bx, by, dbx, dby })
    })
}

/// Splats `src` along `flow` in the given mode. `vis` (`[1×H×W]`, values in
/// `[0,1]`) is used by Linear and Softmax; `None` means visibility 1.
pub fn splat<T: Real>(
    src: &Tensor<T>,
    flow: &Tensor<T>,
    vis: Option<&Tensor<T>>,
    mode: SplatMode,
    cfg: &SplatConfig,
) -> Result<SplatResult<T>> {
    let Geometry { c, h, w } = check_inputs(src, flow, vis)?;
    let n = h * w;
    let m = multipliers(mode, vis, n, cfg);
    let mut num = vec![T::zero(); c * n];
    let mut den = vec![T::zero(); n];
    let (fxs, fys) = flow.data().split_at(n);
    let s = src.data();
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            for k in corners(x, y, fxs[p], fys[p], h, w) {
                let b = k.bx * k.by;
                if b == T::zero() {
                    continue;
                }
                let bm = b * m[p];
                den[k.target] += bm;
                for ci in 0..c {
                    num[ci * n + k.target] += bm * s[ci * n + p];
                }
            }
        }
    }
    let eps = T::lit(cfg.eps_hole);
    let hole_mask: Vec<bool> = den.iter().map(|&d| d < eps).collect();
    for ci in 0..c {
        for t in 0..n {
            let v = &mut num[ci * n + t];
            if hole_mask[t] {
                *v = T::zero();
            } else if mode.normalized() {
                *v /= den[t];
            }
        }
    }
    Ok(SplatResult { value: Tensor::new([c, h, w], num)?, weight: Tensor::new([1, h, w], den)?, hole_mask })
}

/// Plain bilinear forward warp with unit mass per source pixel.
pub fn summation_splat<T: Real>(src: &Tensor<T>, flow: &Tensor<T>) -> Result<SplatResult<T>> {
    splat(src, flow, None, SplatMode::Summation, &SplatConfig::default())
}

/// Visibility-weighted splat normalized by the splatted visibility.
pub fn visibility_splat<T: Real>(src: &Tensor<T>, flow: &Tensor<T>, vis: &Tensor<T>) -> Result<SplatResult<T>> {
    splat(src, flow, Some(vis), SplatMode::Linear, &SplatConfig::default())
}

/// Vector-Jacobian product of [`splat`]'s `value` output. `fwd` must be the
/// result of the forward call with the same arguments.
pub fn splat_backward<T: Real>(
    src: &Tensor<T>,
    flow: &Tensor<T>,
    vis: Option<&Tensor<T>>,
    mode: SplatMode,
    cfg: &SplatConfig,
    fwd: &SplatResult<T>,
    grad_value: &Tensor<T>,
) -> Result<SplatGrads<T>> {
    let Geometry { c, h, w } = check_inputs(src, flow, vis)?;
    grad_value.expect_same_shape(src)?;
    let n = h * w;
    let m = multipliers(mode, vis, n, cfg);
    let den = fwd.weight.data();
    let val = fwd.value.data();
    let gv = grad_value.data();

    // gradients w.r.t. the scattered numerator and normalizer at each target
    let mut g_num = vec![T::zero(); c * n];
    let mut g_den = vec![T::zero(); n];
    for t in 0..n {
        if fwd.hole_mask[t] {
            continue;
        }
        if mode.normalized() {
            let inv = T::one() / den[t];
            let mut acc = T::zero();
            for ci in 0..c {
                g_num[ci * n + t] = gv[ci * n + t] * inv;
                acc += gv[ci * n + t] * val[ci * n + t];
            }
            g_den[t] = -acc * inv;
        } else {
            for ci in 0..c {
                g_num[ci * n + t] = gv[ci * n + t];
            }
        }
    }

    let mut g_src = vec![T::zero(); c * n];
    let mut g_flow = vec![T::zero(); 2 * n];
    let mut g_mult = vec![T::zero(); n];
    let (fxs, fys) = flow.data().split_at(n);
    let s = src.data();
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            for k in corners(x, y, fxs[p], fys[p], h, w) {
                let t = k.target;
                let mut inner = g_den[t];
                for ci in 0..c {
                    inner += s[ci * n + p] * g_num[ci * n + t];
                }
                let b = k.bx * k.by;
                let bm = b * m[p];
                for ci in 0..c {
                    g_src[ci * n + p] += bm * g_num[ci * n + t];
                }
                g_mult[p] += b * inner;
                g_flow[p] += m[p] * inner * k.dbx * k.by;
                g_flow[n + p] += m[p] * inner * k.bx * k.dby;
            }
        }
    }
    let alpha = T::lit(cfg.softmax_alpha);
    let g_vis: Vec<T> = match mode {
        SplatMode::Linear => g_mult,
        SplatMode::Softmax => g_mult.iter().zip(&m).map(|(&g, &mp)| g * alpha * mp).collect(),
        _ => vec![T::zero(); n],
    };
    Ok(SplatGrads {
        src: Tensor::new([c, h, w], g_src)?,
        flow: Tensor::new([2, h, w], g_flow)?,
        vis: Tensor::new([1, h, w], g_vis)?,
    })
}

/// Differentiable splat on a graph. Returns the value variable together with
/// the (untracked) forward result for inspecting weights and holes.
pub fn splat_var<T: Real>(
    g: &Graph<T>,
    src: Var,
    flow: Var,
    vis: Var,
    mode: SplatMode,
    cfg: &SplatConfig,
) -> Result<(Var, SplatResult<T>)> {
    let (vs, vf, vv) = (g.value(src), g.value(flow), g.value(vis));
    let fwd = splat(&vs, &vf, Some(&vv), mode, cfg)?;
    let cfg = *cfg;
    let saved = fwd.clone();
    let out = g.push(fwd.value.clone(), &[src, flow, vis], move |gv| {
        let grads = splat_backward(&vs, &vf, Some(&vv), mode, &cfg, &saved, gv).expect("shapes checked in forward");
        vec![Some(grads.src), Some(grads.flow), Some(grads.vis)]
    });
    Ok((out, fwd))
}
