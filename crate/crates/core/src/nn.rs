//! Named parameter storage and the two layer shapes the model is built from:
//! a 2-D convolution and a convolutional GRU cell.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Named parameter tensors, kept in sorted order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params<T: Real = f32> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Params<T> {
    pub fn new() -> Self {
        Params { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params { map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Places every parameter on `g`, tracked or constant.
    pub fn bind(&self, g: &Graph<T>, tracked: bool) -> ParamVars {
        let map = self
            .map
            .iter()
            .map(|(k, v)| (k.clone(), if tracked { g.leaf(v.clone()) } else { g.constant(v.clone()) }))
            .collect();
        ParamVars { map }
    }
}

/// Parameters as graph variables.
#[derive(Clone, Debug, Default)]
pub struct ParamVars {
    map: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.map.get(name).copied().ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.map.iter()
    }
}

impl FromIterator<(String, Var)> for ParamVars {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        ParamVars { map: iter.into_iter().collect() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Conv2d {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// "Same" padding for odd `k`.
    pub fn new(name: impl Into<String>, c_in: usize, c_out: usize, k: usize, stride: usize) -> Self {
        Conv2d { name: name.into(), c_in, c_out, k, stride, pad: k / 2 }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    /// He-uniform weights scaled by `gain`, zero bias.
    pub fn init<T: Real>(&self, params: &mut Params<T>, rng: &mut impl Rng, gain: f64) {
        let fan_in = (self.c_in * self.k * self.k) as f64;
        let bound = gain * (6.0 / fan_in).sqrt();
        params.insert(self.weight_name(), Tensor::uniform([self.c_out, self.c_in, self.k, self.k], -bound, bound, rng));
        params.insert(self.bias_name(), Tensor::zeros([self.c_out]));
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, vars: &ParamVars, x: Var) -> Result<Var> {
        let w = vars.get(&self.weight_name())?;
        let b = vars.get(&self.bias_name())?;
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Weights of one convolutional GRU cell, already on a graph.
#[derive(Clone, Copy, Debug)]
pub struct GruParams {
    pub update_w: Var,
    pub update_b: Var,
    pub reset_w: Var,
    pub reset_b: Var,
    pub cand_w: Var,
    pub cand_b: Var,
}

/// Convolutional GRU step over `h[C_h×H×W]` and `x[C_x×H×W]`:
/// `z = σ(conv(h⊕x))`, `r = σ(conv(h⊕x))`, `q = tanh(conv((r⊙h)⊕x))`,
/// `h' = (1−z)⊙h + z⊙q`.
pub fn gru_cell<T: Real>(g: &Graph<T>, h: Var, x: Var, p: &GruParams) -> Result<Var> {
    let (sh, sx) = (g.shape(h), g.shape(x));
    if sh.len() != 3 || sx.len() != 3 || sh[1..] != sx[1..] {
        return Err(Error::Shape(format!("gru_cell: state {sh:?} and input {sx:?} disagree spatially")));
    }
    let k = g.shape(p.update_w)[2];
    let pad = k / 2;
    let hx = g.concat(&[h, x])?;
    let z = g.sigmoid(g.conv2d(hx, p.update_w, p.update_b, 1, pad)?);
    let r = g.sigmoid(g.conv2d(hx, p.reset_w, p.reset_b, 1, pad)?);
    let rh = g.mul(r, h)?;
    let rhx = g.concat(&[rh, x])?;
    let q = g.tanh(g.conv2d(rhx, p.cand_w, p.cand_b, 1, pad)?);
    let dq = g.sub(q, h)?;
    let step = g.mul(z, dq)?;
    g.add(h, step)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvGru {
    pub update: Conv2d,
    pub reset: Conv2d,
    pub cand: Conv2d,
    pub c_h: usize,
    pub c_x: usize,
}

impl ConvGru {
    pub fn new(name: &str, c_h: usize, c_x: usize, k: usize) -> Self {
        ConvGru {
            update: Conv2d::new(format!("{name}.update"), c_h + c_x, c_h, k, 1),
            reset: Conv2d::new(format!("{name}.reset"), c_h + c_x, c_h, k, 1),
            cand: Conv2d::new(format!("{name}.cand"), c_h + c_x, c_h, k, 1),
            c_h,
            c_x,
        }
    }

    pub fn init<T: Real>(&self, params: &mut Params<T>, rng: &mut impl Rng) {
        self.update.init(params, rng, 0.5);
        self.reset.init(params, rng, 0.5);
        self.cand.init(params, rng, 0.5);
    }

    pub fn bind(&self, vars: &ParamVars) -> Result<GruParams> {
        Ok(GruParams {
            update_w: vars.get(&self.update.weight_name())?,
            update_b: vars.get(&self.update.bias_name())?,
            reset_w: vars.get(&self.reset.weight_name())?,
            reset_b: vars.get(&self.reset.bias_name())?,
            cand_w: vars.get(&self.cand.weight_name())?,
            cand_b: vars.get(&self.cand.bias_name())?,
        })
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, vars: &ParamVars, h: Var, x: Var) -> Result<Var> {
        gru_cell(g, h, x, &self.bind(vars)?)
    }
}
