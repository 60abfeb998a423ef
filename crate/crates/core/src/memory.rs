//! Streaming memory: a bounded FIFO bank of key/value feature grids read by
//! single-head dot-product attention, the residual fusion that repairs
//! splatting holes, and the recurrent sensory memory.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{Conv2d, ConvGru, ParamVars, Params};
use crate::tensor::{read_tensor, write_tensor, Real, Tensor};

/// Two FIFO queues of equal length holding keys `[rows×D_k]` and values
/// `[rows×D_v]`, oldest first. Pushing at capacity evicts the oldest pair.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank<E> {
    keys: VecDeque<E>,
    values: VecDeque<E>,
    capacity: usize,
}

impl<E> MemoryBank<E> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "memory bank capacity must be positive");
        MemoryBank { keys: VecDeque::with_capacity(capacity), values: VecDeque::with_capacity(capacity), capacity }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Appends as newest, evicting the oldest pair when full.
    pub fn push(&mut self, key: E, value: E) {
        if self.keys.len() == self.capacity {
            self.keys.pop_front();
            self.values.pop_front();
        }
        self.keys.push_back(key);
        self.values.push_back(value);
    }

    pub fn keys(&self) -> impl Iterator<Item = &E> {
        self.keys.iter()
    }

    pub fn values(&self) -> impl Iterator<Item = &E> {
        self.values.iter()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&E, &E)> {
        self.keys.iter().zip(&self.values)
    }

    /// Changes the capacity, dropping the oldest entries if needed.
    pub fn set_capacity(&mut self, capacity: usize) {
        assert!(capacity > 0, "memory bank capacity must be positive");
        while self.keys.len() > capacity {
            self.keys.pop_front();
            self.values.pop_front();
        }
        self.capacity = capacity;
    }

    pub fn try_map<U>(&self, mut f: impl FnMut(&E) -> Result<U>) -> Result<MemoryBank<U>> {
        Ok(MemoryBank {
            keys: self.keys.iter().map(&mut f).collect::<Result<_>>()?,
            values: self.values.iter().map(&mut f).collect::<Result<_>>()?,
            capacity: self.capacity,
        })
    }
}

fn check_entry(key: &[usize], value: &[usize], existing: Option<(&[usize], &[usize])>) -> Result<()> {
    if key.len() != 2 || value.len() != 2 || key[0] != value[0] {
        return shape_err(format!("bank entry key {key:?} / value {value:?} must be [rows,D] with equal rows"));
    }
    if let Some((k, v)) = existing {
        if k != key || v != value {
            return shape_err(format!("bank entry key {key:?} / value {value:?} differs from stored {k:?} / {v:?}"));
        }
    }
    Ok(())
}

impl<T: Real> MemoryBank<Tensor<T>> {
    /// Geometry-checked [`MemoryBank::push`].
    pub fn write(&mut self, key: Tensor<T>, value: Tensor<T>) -> Result<()> {
        let existing = self.keys.front().zip(self.values.front()).map(|(k, v)| (k.shape(), v.shape()));
        check_entry(key.shape(), value.shape(), existing)?;
        self.push(key, value);
        Ok(())
    }

    /// Bytes held by the stored tensors.
    pub fn footprint(&self) -> usize {
        self.entries().map(|(k, v)| (k.numel() + v.numel()) * std::mem::size_of::<T>()).sum()
    }

    /// Writes `key_NNN.spt`/`value_NNN.spt` per entry plus a `manifest.txt`
    /// listing them oldest first.
    pub fn save_snapshot(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut manifest = format!("capacity {}\n", self.capacity);
        for (i, (k, v)) in self.entries().enumerate() {
            let (kn, vn) = (format!("key_{i:03}.spt"), format!("value_{i:03}.spt"));
            write_tensor(dir.join(&kn), k)?;
            write_tensor(dir.join(&vn), v)?;
            writeln!(manifest, "{kn} {vn}").unwrap();
        }
        std::fs::write(dir.join("manifest.txt"), manifest)?;
        Ok(())
    }

    pub fn load_snapshot(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let text = std::fs::read_to_string(dir.join("manifest.txt"))?;
        let mut lines = text.lines();
        let capacity = lines
            .next()
            .and_then(|l| l.strip_prefix("capacity "))
            .and_then(|c| c.trim().parse().ok())
            .filter(|&c: &usize| c > 0)
            .ok_or_else(|| Error::Parse { offset: 0, msg: "manifest must start with `capacity N`".into() })?;
        let mut bank = MemoryBank::new(capacity);
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let mut parts = line.split_whitespace();
            let (Some(k), Some(v)) = (parts.next(), parts.next()) else {
                return Err(Error::Parse { offset: 0, msg: format!("bad manifest line `{line}`") });
            };
            bank.write(read_tensor(dir.join(k))?.into_real(), read_tensor(dir.join(v))?.into_real())?;
        }
        Ok(bank)
    }
}

/// Geometry-checked push of graph variables.
pub fn write_var<T: Real>(g: &Graph<T>, bank: &mut MemoryBank<Var>, key: Var, value: Var) -> Result<()> {
    let (ks, vs) = (g.shape(key), g.shape(value));
    let existing = bank.keys.front().zip(bank.values.front()).map(|(&k, &v)| (g.shape(k), g.shape(v)));
    check_entry(&ks, &vs, existing.as_ref().map(|(k, v)| (k.as_slice(), v.as_slice())))?;
    bank.push(key, value);
    Ok(())
}

/// Attention readout `softmax(q·kᵀ/√D_k)·v` over every stored row, with
/// `q[rows×D_k]`. Returns `[rows_q×D_v]`.
pub fn attend<T: Real>(g: &Graph<T>, bank: &MemoryBank<Var>, q: Var) -> Result<Var> {
    if bank.is_empty() {
        return Err(Error::Contract("read from an empty memory bank".into()));
    }
    let keys: Vec<Var> = bank.keys().copied().collect();
    let values: Vec<Var> = bank.values().copied().collect();
    let k = g.concat(&keys)?;
    let v = g.concat(&values)?;
    let dk = g.shape(q)[1];
    if g.shape(k)[1] != dk {
        return shape_err(format!("query width {dk} does not match key width {}", g.shape(k)[1]));
    }
    let kt = g.transpose2d(k)?;
    let logits = g.scale(g.matmul(q, kt)?, 1.0 / (dk as f64).sqrt());
    let attn = g.softmax_lastdim(logits)?;
    g.matmul(attn, v)
}

/// [`attend`] reshaped to a feature grid `[D_v×h×w]`.
pub fn read<T: Real>(g: &Graph<T>, bank: &MemoryBank<Var>, q: Var, h: usize, w: usize) -> Result<Var> {
    let rows = attend(g, bank, q)?;
    let cols = g.transpose2d(rows)?;
    let dv = g.shape(cols)[0];
    g.reshape(cols, [dv, h, w])
}

/// [`read`] on plain tensors.
pub fn read_tensor_bank<T: Real>(bank: &MemoryBank<Tensor<T>>, q: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let g = Graph::no_grad();
    let b = bank.try_map(|t| Ok(g.constant(t.clone())))?;
    let qv = g.constant(q.clone());
    let out = read(&g, &b, qv, h, w)?;
    Ok((*g.value(out)).clone())
}

/// Flattens a grid `[C×h×w]` into per-pixel rows `[hw×C]`.
pub fn grid_to_rows<T: Real>(g: &Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x);
    if s.len() != 3 {
        return shape_err(format!("expected [C,h,w], got {s:?}"));
    }
    let flat = g.reshape(x, [s[0], s[1] * s[2]])?;
    g.transpose2d(flat)
}

/// Per-pixel linear map `D → D_k` producing memory queries; identity when
/// ablated.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueryProjector {
    conv: Option<Conv2d>,
}

impl QueryProjector {
    pub fn new(feature_dim: usize, key_dim: usize, enabled: bool) -> Self {
        QueryProjector { conv: enabled.then(|| Conv2d::new("memory.query", feature_dim, key_dim, 1, 1)) }
    }

    pub fn init<T: Real>(&self, params: &mut Params<T>, rng: &mut impl Rng) {
        if let Some(c) = &self.conv {
            c.init(params, rng, 1.0);
        }
    }

    /// `F[D×h×w]` → `q[hw×D_k]`.
    pub fn forward<T: Real>(&self, g: &Graph<T>, vars: &ParamVars, f: Var) -> Result<Var> {
        let x = match &self.conv {
            Some(c) => c.forward(g, vars, f)?,
            None => f,
        };
        grid_to_rows(g, x)
    }
}

/// `F̂ = F + Conv(F ⊕ F')`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fusion {
    conv: Conv2d,
}

impl Fusion {
    pub fn new(feature_dim: usize, value_dim: usize, kernel: usize) -> Self {
        Fusion { conv: Conv2d::new("memory.fusion", feature_dim + value_dim, feature_dim, kernel, 1) }
    }

    pub fn init<T: Real>(&self, params: &mut Params<T>, rng: &mut impl Rng) {
        self.conv.init(params, rng, 0.1);
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, vars: &ParamVars, f: Var, readout: Var) -> Result<Var> {
        let (sf, sr) = (g.shape(f), g.shape(readout));
        if sf.len() != 3 || sr.len() != 3 || sf[1..] != sr[1..] {
            return shape_err(format!("fusion: feature {sf:?} and readout {sr:?} disagree"));
        }
        let cat = g.concat(&[f, readout])?;
        let delta = self.conv.forward(g, vars, cat)?;
        g.add(f, delta)
    }
}

/// Recurrent short-term motion state `s_t = GRU(s_{t−1}, f_m)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SensoryMemory {
    gru: ConvGru,
}

impl SensoryMemory {
    pub fn new(state_dim: usize, motion_dim: usize, kernel: usize) -> Self {
        SensoryMemory { gru: ConvGru::new("sensory", state_dim, motion_dim, kernel) }
    }

    pub fn state_dim(&self) -> usize {
        self.gru.c_h
    }

    pub fn init<T: Real>(&self, params: &mut Params<T>, rng: &mut impl Rng) {
        self.gru.init(params, rng);
    }

    pub fn update<T: Real>(&self, g: &Graph<T>, vars: &ParamVars, state: Var, motion: Var) -> Result<Var> {
        self.gru.forward(g, vars, state, motion)
    }
}
