//! Iterative flow and visibility decoding: an all-pairs correlation pyramid
//! between reference and current features, local lookups around the current
//! estimate, a motion encoder, and a convolutional GRU emitting residual
//! updates.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::nn::{Conv2d, ConvGru, ParamVars, Params};
use crate::tensor::kernels::{bilinear_taps, sample_clamped, sample_zero};
use crate::tensor::{Real, Tensor};

/// Displacement field `[2×h×w]` in pixels of its own resolution; channel 0
/// is Δx (rightward), channel 1 is Δy (downward).
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField<T: Real = f32>(pub Tensor<T>);

impl<T: Real> FlowField<T> {
    pub fn zeros(h: usize, w: usize) -> Self {
        FlowField(Tensor::zeros([2, h, w]))
    }

    pub fn height(&self) -> usize {
        self.0.dim(1)
    }

    pub fn width(&self) -> usize {
        self.0.dim(2)
    }

    /// `(Δx, Δy)` at pixel `(x, y)`.
    pub fn at(&self, x: usize, y: usize) -> (T, T) {
        (self.0.at(&[0, y, x]), self.0.at(&[1, y, x]))
    }
}

/// Visibility as logits `[1×h×w]`; probabilities are their sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct VisibilityMap<T: Real = f32> {
    pub logits: Tensor<T>,
}

impl<T: Real> VisibilityMap<T> {
    pub fn from_logits(logits: Tensor<T>) -> Self {
        VisibilityMap { logits }
    }

    pub fn prob(&self) -> Tensor<T> {
        self.logits.map(crate::autodiff::sigmoid_scalar)
    }
}

/// All-pairs correlation between `source[D×h×w]` and `target[D×h×w]`:
/// level 0 is `[hw×h×w]` with `corr[p, q] = ⟨source(p), target(q)⟩ / √D`,
/// each further level 2×-average-pools the target axes.
pub fn build_correlation<T: Real>(g: &Graph<T>, source: Var, target: Var, levels: usize) -> Result<Vec<Var>> {
    let (ss, st) = (g.shape(source), g.shape(target));
    if ss.len() != 3 || ss != st {
        return shape_err(format!("correlation inputs {ss:?} and {st:?} must be equal [D,h,w]"));
    }
    let (d, h, w) = (ss[0], ss[1], ss[2]);
    let a = g.transpose2d(g.reshape(source, [d, h * w])?)?;
    let b = g.reshape(target, [d, h * w])?;
    let corr = g.scale(g.matmul(a, b)?, 1.0 / (d as f64).sqrt());
    let mut level = g.reshape(corr, [h * w, h, w])?;
    let mut pyramid = vec![level];
    for _ in 1..levels {
        level = g.avg_pool2(level)?;
        pyramid.push(level);
    }
    Ok(pyramid)
}

/// Samples every pyramid level on a `(2r+1)²` window centered on
/// `(x, y) + flow(x, y)` for each source pixel. Level `l` maps a level-0
/// coordinate `c` to `(c + 0.5)/2^l − 0.5`. Channel order is level-major,
/// then window row, then window column. `flow` is a plain coordinate input
/// (not differentiated).
pub fn lookup<T: Real>(g: &Graph<T>, pyramid: &[Var], flow: &Tensor<T>, radius: usize) -> Result<Var> {
    if pyramid.is_empty() {
        return shape_err("empty correlation pyramid");
    }
    let s0 = g.shape(pyramid[0]);
    let (h, w) = (flow.dim(1), flow.dim(2));
    if flow.ndim() != 3 || flow.dim(0) != 2 || s0[0] != h * w {
        return shape_err(format!("lookup flow {:?} does not match pyramid {:?}", flow.shape(), s0));
    }
    let n = h * w;
    let side = 2 * radius + 1;
    let win = side * side;
    let levels: Vec<_> = pyramid.iter().map(|&l| g.value(l)).collect();
    let half = T::lit(0.5);
    let r = radius as isize;

    // sample centers per level and pixel
    let centers: Vec<Vec<(T, T)>> = (0..levels.len())
        .map(|l| {
            let scale = T::lit(0.5f64.powi(l as i32));
            (0..n)
                .map(|p| {
                    let x = T::from_usize(p % w).unwrap() + flow.data()[p];
                    let y = T::from_usize(p / w).unwrap() + flow.data()[n + p];
                    ((x + half) * scale - half, (y + half) * scale - half)
                })
                .collect()
        })
        .collect();

    let mut out = vec![T::zero(); levels.len() * win * n];
    for (l, lv) in levels.iter().enumerate() {
        let (hl, wl) = (lv.dim(1), lv.dim(2));
        for p in 0..n {
            let plane = &lv.data()[p * hl * wl..(p + 1) * hl * wl];
            let (cx, cy) = centers[l][p];
            for dy in -r..=r {
                for dx in -r..=r {
                    let ch = l * win + (dy + r) as usize * side + (dx + r) as usize;
                    let (sx, sy) = (cx + T::from_isize(dx).unwrap(), cy + T::from_isize(dy).unwrap());
                    out[ch * n + p] = sample_zero(plane, hl, wl, sx, sy);
                }
            }
        }
    }
    let shapes: Vec<[usize; 3]> = levels.iter().map(|l| [l.dim(0), l.dim(1), l.dim(2)]).collect();
    let value = Tensor::new([levels.len() * win, h, w], out)?;
    Ok(g.push(value, pyramid, move |gout| {
        shapes
            .iter()
            .enumerate()
            .map(|(l, &[_, hl, wl])| {
                let mut gl = vec![T::zero(); n * hl * wl];
                for p in 0..n {
                    let (cx, cy) = centers[l][p];
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let ch = l * win + (dy + r) as usize * side + (dx + r) as usize;
                            let go = gout.data()[ch * n + p];
                            if go == T::zero() {
                                continue;
                            }
                            let (sx, sy) = (cx + T::from_isize(dx).unwrap(), cy + T::from_isize(dy).unwrap());
                            if !sx.is_finite() || !sy.is_finite() {
                                continue;
                            }
                            for (tx, ty, wt) in bilinear_taps(sx, sy) {
                                if tx >= 0 && ty >= 0 && (tx as usize) < wl && (ty as usize) < hl {
                                    gl[p * hl * wl + ty as usize * wl + tx as usize] += wt * go;
                                }
                            }
                        }
                    }
                }
                Some(Tensor::new([n, hl, wl], gl).unwrap())
            })
            .collect()
    }))
}

/// Encodes the current estimate and its correlation evidence into `D_m`
/// motion channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MotionEncoder {
    corr: Conv2d,
    flow: Conv2d,
    mix: Conv2d,
}

impl MotionEncoder {
    pub fn new(lookup_channels: usize, motion_dim: usize) -> Self {
        let c_flow = (motion_dim / 2).max(1);
        MotionEncoder {
            corr: Conv2d::new("motion.corr", lookup_channels, motion_dim, 1, 1),
            flow: Conv2d::new("motion.flow", 3, c_flow, 3, 1),
            mix: Conv2d::new("motion.mix", motion_dim + c_flow, motion_dim, 3, 1),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.mix.c_out
    }

    pub fn init<T: Real>(&self, params: &mut Params<T>, rng: &mut impl Rng) {
        self.corr.init(params, rng, 1.0);
        self.flow.init(params, rng, 1.0);
        self.mix.init(params, rng, 1.0);
    }

    /// `flow[2×h×w]`, `vis_logits[1×h×w]`, `corr[K×h×w]` → `[D_m×h×w]`.
    pub fn forward<T: Real>(&self, g: &Graph<T>, vars: &ParamVars, flow: Var, vis_logits: Var, corr: Var) -> Result<Var> {
        let c = g.relu(self.corr.forward(g, vars, corr)?);
        let fv = g.concat(&[flow, g.sigmoid(vis_logits)])?;
        let f = g.relu(self.flow.forward(g, vars, fv)?);
        let cat = g.concat(&[c, f])?;
        Ok(g.relu(self.mix.forward(g, vars, cat)?))
    }
}

/// GRU over `context ⊕ motion ⊕ sensory` with flow and visibility heads.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UpdateBlock {
    gru: ConvGru,
    flow_head: Conv2d,
    vis_head: Conv2d,
}

impl UpdateBlock {
    pub fn new(hidden_dim: usize, input_dim: usize, kernel: usize) -> Self {
        UpdateBlock {
            gru: ConvGru::new("update.gru", hidden_dim, input_dim, kernel),
            flow_head: Conv2d::new("update.flow_head", hidden_dim, 2, 3, 1),
            vis_head: Conv2d::new("update.vis_head", hidden_dim, 1, 3, 1),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.gru.c_h
    }

    pub fn input_dim(&self) -> usize {
        self.gru.c_x
    }

    pub fn init<T: Real>(&self, params: &mut Params<T>, rng: &mut impl Rng) {
        self.gru.init(params, rng);
        self.flow_head.init(params, rng, 0.1);
        self.vis_head.init(params, rng, 0.1);
    }

    /// One refinement: `(Δflow, Δvis_logit, hidden')`.
    pub fn forward<T: Real>(
        &self,
        g: &Graph<T>,
        vars: &ParamVars,
        hidden: Var,
        context: Var,
        motion: Var,
        sensory: Option<Var>,
    ) -> Result<(Var, Var, Var)> {
        let mut inputs = vec![context, motion];
        inputs.extend(sensory);
        let x = g.concat(&inputs)?;
        let h = self.gru.forward(g, vars, hidden, x)?;
        let df = self.flow_head.forward(g, vars, h)?;
        let dv = self.vis_head.forward(g, vars, h)?;
        Ok((df, dv, h))
    }
}

/// Output of [`Decoder::decode`]. `motion` is `None` only when no iteration ran.
#[derive(Clone, Debug)]
pub struct DecodeResult {
    pub flow: Var,
    pub vis_logits: Var,
    pub hidden: Var,
    pub motion: Option<Var>,
    pub per_iter_flows: Vec<Var>,
    pub per_iter_vis: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decoder {
    pub motion: MotionEncoder,
    pub update: UpdateBlock,
    pub levels: usize,
    pub radius: usize,
}

/// Inputs of one decoding run. Initial flow and visibility are treated as
/// coordinates: gradients do not flow into them.
#[derive(Clone, Copy, Debug)]
pub struct DecodeInputs {
    pub enhanced: Var,
    pub reference: Var,
    pub context: Var,
    pub sensory: Option<Var>,
    pub init_flow: Var,
    pub init_vis_logits: Var,
    pub init_hidden: Var,
}

impl Decoder {
    pub fn init<T: Real>(&self, params: &mut Params<T>, rng: &mut impl Rng) {
        self.motion.init(params, rng);
        self.update.init(params, rng);
    }

    /// Runs `iters` refinement steps. Each step detaches the running estimate,
    /// looks up the correlation pyramid around it, and adds the GRU residual.
    pub fn decode<T: Real>(&self, g: &Graph<T>, vars: &ParamVars, inp: &DecodeInputs, iters: usize) -> Result<DecodeResult> {
        let mut flow = inp.init_flow;
        let mut vis = inp.init_vis_logits;
        let mut hidden = inp.init_hidden;
        let mut motion = None;
        let mut per_iter_flows = Vec::with_capacity(iters);
        let mut per_iter_vis = Vec::with_capacity(iters);
        if iters == 0 {
            return Ok(DecodeResult { flow, vis_logits: vis, hidden, motion, per_iter_flows, per_iter_vis });
        }
        // frame-1 pixels index the source axis, current-frame pixels are pooled
        let pyramid = build_correlation(g, inp.reference, inp.enhanced, self.levels)?;
        for _ in 0..iters {
            let f0 = g.detach(flow);
            let v0 = g.detach(vis);
            let corr = lookup(g, &pyramid, &g.value(f0), self.radius)?;
            let fm = self.motion.forward(g, vars, f0, v0, corr)?;
            let (df, dv, h) = self.update.forward(g, vars, hidden, inp.context, fm, inp.sensory)?;
            flow = g.add(f0, df)?;
            vis = g.add(v0, dv)?;
            hidden = h;
            motion = Some(fm);
            per_iter_flows.push(flow);
            per_iter_vis.push(vis);
        }
        Ok(DecodeResult { flow, vis_logits: vis, hidden, motion, per_iter_flows, per_iter_vis })
    }
}

/// Bilinear 4× upsampling of quarter-resolution outputs. Full-resolution
/// pixel `X` reads quarter coordinate `(X + 0.5)/4 − 0.5` with edge
/// clamping; flow values are multiplied by 4, logits are not rescaled.
pub fn upsample4x<T: Real>(flow: &FlowField<T>, vis: &VisibilityMap<T>) -> (FlowField<T>, VisibilityMap<T>) {
    let up = |t: &Tensor<T>, gain: T| -> Tensor<T> {
        let (c, h, w) = (t.dim(0), t.dim(1), t.dim(2));
        let (ho, wo) = (4 * h, 4 * w);
        let quarter = T::lit(0.25);
        let half = T::lit(0.5);
        let mut out = vec![T::zero(); c * ho * wo];
        for ci in 0..c {
            let plane = &t.data()[ci * h * w..(ci + 1) * h * w];
            for y in 0..ho {
                let sy = (T::from_usize(y).unwrap() + half) * quarter - half;
                for x in 0..wo {
                    let sx = (T::from_usize(x).unwrap() + half) * quarter - half;
                    out[(ci * ho + y) * wo + x] = gain * sample_clamped(plane, h, w, sx, sy);
                }
            }
        }
        Tensor::new([c, ho, wo], out).unwrap()
    };
    (FlowField(up(&flow.0, T::lit(4.0))), VisibilityMap::from_logits(up(&vis.logits, T::one())))
}

/// Block-averages a full-resolution field down by 4 (`[C×4h×4w]` → `[C×h×w]`),
/// scaling values by `gain`. Used to bring ground truth to decoder resolution.
pub fn downsample4x<T: Real>(t: &Tensor<T>, gain: f64) -> Result<Tensor<T>> {
    if t.ndim() != 3 || t.dim(1) % 4 != 0 || t.dim(2) % 4 != 0 {
        return shape_err(format!("downsample4x needs [C,4h,4w], got {:?}", t.shape()));
    }
    let (c, hf, wf) = (t.dim(0), t.dim(1), t.dim(2));
    let (h, w) = (hf / 4, wf / 4);
    let s = T::lit(gain / 16.0);
    let mut out = vec![T::zero(); c * h * w];
    for ci in 0..c {
        for y in 0..hf {
            for x in 0..wf {
                out[(ci * h + y / 4) * w + x / 4] += t.data()[(ci * hf + y) * wf + x];
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= s);
    Tensor::new([c, h, w], out)
}
