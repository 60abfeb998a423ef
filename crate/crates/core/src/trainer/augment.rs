//! Label-preserving augmentation of training sequences: the eight
//! symmetries of the pixel grid and the six orderings of the color channels.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::decoder::FlowField;
use crate::encoder::Frame;
use crate::synth::{Mask, SceneConfig, SequenceRecord};
use crate::tensor::Tensor;

/// A grid symmetry followed by a channel permutation. Flips are applied
/// before the transpose.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augmentation {
    pub flip_x: bool,
    pub flip_y: bool,
    pub transpose: bool,
    /// Output channel `c` takes input channel `channels[c]`.
    pub channels: [usize; 3],
}

impl Default for Augmentation {
    fn default() -> Self {
        Augmentation { flip_x: false, flip_y: false, transpose: false, channels: [0, 1, 2] }
    }
}

impl Augmentation {
    /// Uniform over all 48 combinations.
    pub fn sample(rng: &mut impl Rng) -> Self {
        let mut channels = [0, 1, 2];
        channels.shuffle(rng);
        Augmentation { flip_x: rng.gen(), flip_y: rng.gen(), transpose: rng.gen(), channels }
    }

    /// Destination of pixel `(x, y)` on an `h×w` grid.
    pub fn map_point(&self, x: usize, y: usize, h: usize, w: usize) -> (usize, usize) {
        let x1 = if self.flip_x { w - 1 - x } else { x };
        let y1 = if self.flip_y { h - 1 - y } else { y };
        if self.transpose {
            (y1, x1)
        } else {
            (x1, y1)
        }
    }

    /// The linear part of [`Augmentation::map_point`] applied to a displacement.
    pub fn map_vector(&self, u: f32, v: f32) -> (f32, f32) {
        let u1 = if self.flip_x { -u } else { u };
        let v1 = if self.flip_y { -v } else { v };
        if self.transpose {
            (v1, u1)
        } else {
            (u1, v1)
        }
    }

    fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        if self.transpose {
            (w, h)
        } else {
            (h, w)
        }
    }

    /// Moves every plane of a `[C×h×w]` tensor; `channel(c)` names the input
    /// channel for output channel `c`.
    fn planes(&self, t: &Tensor<f32>, channel: impl Fn(usize) -> usize) -> Tensor<f32> {
        let (c, h, w) = (t.dim(0), t.dim(1), t.dim(2));
        let (ho, wo) = self.out_dims(h, w);
        let mut out = vec![0.0f32; c * h * w];
        let src = t.data();
        for co in 0..c {
            let ci = channel(co);
            for y in 0..h {
                for x in 0..w {
                    let (xo, yo) = self.map_point(x, y, h, w);
                    out[(co * ho + yo) * wo + xo] = src[(ci * h + y) * w + x];
                }
            }
        }
        Tensor::new([c, ho, wo], out).expect("same element count")
    }

    fn frame(&self, f: &Frame) -> Frame {
        Frame::new(self.planes(f.tensor(), |c| self.channels[c])).expect("valid frame")
    }

    fn flow(&self, f: &FlowField) -> FlowField {
        let moved = self.planes(&f.0, |c| c);
        let n = moved.numel() / 2;
        let mut data = moved.data().to_vec();
        for i in 0..n {
            let (u, v) = self.map_vector(data[i], data[n + i]);
            data[i] = u;
            data[n + i] = v;
        }
        FlowField(Tensor::new(moved.shape().to_vec(), data).expect("same shape"))
    }

    fn mask(&self, m: &Mask) -> Mask {
        let (ho, wo) = self.out_dims(m.height, m.width);
        let mut data = vec![false; m.data.len()];
        for y in 0..m.height {
            for x in 0..m.width {
                let (xo, yo) = self.map_point(x, y, m.height, m.width);
                data[yo * wo + xo] = m.get(x, y);
            }
        }
        Mask { height: ho, width: wo, data }
    }

    pub fn apply(&self, seq: &SequenceRecord) -> SequenceRecord {
        let (height, width) = self.out_dims(seq.config.height, seq.config.width);
        SequenceRecord {
            frames: seq.frames.iter().map(|f| self.frame(f)).collect(),
            gt_flow: seq.gt_flow.iter().map(|f| self.flow(f)).collect(),
            gt_vis: seq.gt_vis.iter().map(|m| self.mask(m)).collect(),
            config: SceneConfig { height, width, ..seq.config.clone() },
        }
    }
}
