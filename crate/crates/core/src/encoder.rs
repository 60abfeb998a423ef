//! Convolutional feature extraction at 1/4 resolution.
//!
//! Layout: 7×7 stride-2 stem, two residual blocks, a stride-2 residual
//! transition, two more residual blocks, and a 1×1 projection. The frame
//! encoder normalizes every convolution, the projection included, per
//! instance; the context encoder uses no normalization.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{Conv2d, ParamVars, Params};
use crate::tensor::{Real, Tensor};

const NORM_EPS: f64 = 1e-5;

/// An RGB frame `[3×H×W]` with values in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame<T: Real = f32>(Tensor<T>);

impl<T: Real> Frame<T> {
    pub fn new(data: Tensor<T>) -> Result<Self> {
        if data.ndim() != 3 || data.dim(0) != 3 {
            return shape_err(format!("frame must be [3,H,W], got {:?}", data.shape()));
        }
        if data.dim(1) == 0 || data.dim(2) == 0 {
            return shape_err("frame has zero area");
        }
        if data.data().iter().any(|v| !(*v >= T::zero() && *v <= T::one())) {
            return Err(Error::Domain("frame values must lie in [0,1]".into()));
        }
        Ok(Frame(data))
    }

    pub fn height(&self) -> usize {
        self.0.dim(1)
    }

    pub fn width(&self) -> usize {
        self.0.dim(2)
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    /// Reflection-pads bottom/right so both sides are multiples of `m`.
    pub fn padded_to_multiple(&self, m: usize) -> Frame<T> {
        let (h, w) = (self.height(), self.width());
        let (hp, wp) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        if (hp, wp) == (h, w) {
            return self.clone();
        }
        let reflect = |i: usize, n: usize| -> usize {
            if n == 1 {
                return 0;
            }
            let period = 2 * (n - 1);
            let r = i % period;
            if r < n {
                r
            } else {
                period - r
            }
        };
        let src = self.0.data();
        let data = (0..3 * hp * wp)
            .map(|idx| {
                let (c, rest) = (idx / (hp * wp), idx % (hp * wp));
                let (y, x) = (reflect(rest / wp, h), reflect(rest % wp, w));
                src[(c * h + y) * w + x]
            })
            .collect();
        Frame(Tensor::new([3, hp, wp], data).unwrap())
    }
}

/// Encoder output at 1/4 resolution, `[D×H/4×W/4]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T: Real = f32>(pub Tensor<T>);

/// Context features of the reference frame, `[D_c×H/4×W/4]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextFeature<T: Real = f32>(pub Tensor<T>);

#[derive(Clone, Debug, PartialEq, Eq)]
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(name: &str, c_in: usize, c_out: usize, stride: usize) -> Self {
        let skip = (stride != 1 || c_in != c_out).then(|| Conv2d::new(format!("{name}.skip"), c_in, c_out, 1, stride));
        ResBlock {
            conv1: Conv2d::new(format!("{name}.conv1"), c_in, c_out, 3, stride),
            conv2: Conv2d::new(format!("{name}.conv2"), c_out, c_out, 3, 1),
            skip,
        }
    }

    fn convs(&self) -> impl Iterator<Item = &Conv2d> {
        [&self.conv1, &self.conv2].into_iter().chain(self.skip.as_ref())
    }

    fn forward<T: Real>(&self, g: &Graph<T>, vars: &ParamVars, x: Var, norm: bool) -> Result<Var> {
        let n = |v: Var| if norm { g.instance_norm(v, NORM_EPS) } else { Ok(v) };
        let y = g.relu(n(self.conv1.forward(g, vars, x)?)?);
        let y = g.relu(n(self.conv2.forward(g, vars, y)?)?);
        let s = match &self.skip {
            Some(conv) => n(conv.forward(g, vars, x)?)?,
            None => x,
        };
        Ok(g.relu(g.add(s, y)?))
    }
}

/// Residual convolutional encoder with total stride 4.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoder {
    stem: Conv2d,
    blocks: Vec<ResBlock>,
    proj: Conv2d,
    norm: bool,
}

impl Encoder {
    pub fn new(name: &str, widths: [usize; 2], out_dim: usize, norm: bool) -> Self {
        let [c1, c2] = widths;
        Encoder {
            stem: Conv2d::new(format!("{name}.stem"), 3, c1, 7, 2),
            blocks: vec![
                ResBlock::new(&format!("{name}.layer1a"), c1, c1, 1),
                ResBlock::new(&format!("{name}.layer1b"), c1, c1, 1),
                ResBlock::new(&format!("{name}.layer2a"), c1, c2, 2),
                ResBlock::new(&format!("{name}.layer2b"), c2, c2, 1),
                ResBlock::new(&format!("{name}.layer2c"), c2, c2, 1),
            ],
            proj: Conv2d::new(format!("{name}.proj"), c2, out_dim, 1, 1),
            norm,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.proj.c_out
    }

    pub fn init<T: Real>(&self, params: &mut Params<T>, rng: &mut impl Rng) {
        self.stem.init(params, rng, 1.0);
        for block in &self.blocks {
            for conv in block.convs() {
                conv.init(params, rng, 1.0);
            }
        }
        self.proj.init(params, rng, 1.0);
    }

    /// `frame[3×H×W]` → `[out_dim×H/4×W/4]`. Both sides must be multiples of 4.
    pub fn forward<T: Real>(&self, g: &Graph<T>, vars: &ParamVars, frame: Var) -> Result<Var> {
        let shape = g.shape(frame);
        if shape.len() != 3 || shape[0] != 3 {
            return shape_err(format!("encoder input must be [3,H,W], got {shape:?}"));
        }
        if shape[1] % 4 != 0 || shape[2] % 4 != 0 {
            return shape_err(format!("encoder input {}x{} not divisible by 4", shape[1], shape[2]));
        }
        let mut x = self.stem.forward(g, vars, frame)?;
        if self.norm {
            x = g.instance_norm(x, NORM_EPS)?;
        }
        x = g.relu(x);
        for block in &self.blocks {
            x = block.forward(g, vars, x, self.norm)?;
        }
        let out = self.proj.forward(g, vars, x)?;
        if self.norm {
            g.instance_norm(out, NORM_EPS)
        } else {
            Ok(out)
        }
    }

    /// Evaluates on a plain tensor without recording gradients.
    pub fn encode<T: Real>(&self, params: &Params<T>, frame: &Frame<T>) -> Result<Tensor<T>> {
        let g = Graph::no_grad();
        let vars = params.bind(&g, false);
        let x = g.constant(frame.tensor().clone());
        let out = self.forward(&g, &vars, x)?;
        Ok((*g.value(out)).clone())
    }
}
