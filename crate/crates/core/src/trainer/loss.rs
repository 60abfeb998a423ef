use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::decoder::{downsample4x, FlowField};
use crate::error::{shape_err, Result};
use crate::synth::Mask;
use crate::tensor::{Real, Tensor};

/// Weights of the sequence loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Discount `γ` on earlier refinement iterations.
    pub gamma: f64,
    /// Weight `λ` of the visibility term.
    pub lambda: f64,
    /// Probability clamp inside the cross-entropy.
    pub bce_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { gamma: 0.8, lambda: 1.0, bce_eps: 1e-6 }
    }
}

/// Ground truth of one frame at decoder resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct QuarterTarget<T: Real = f32> {
    /// Flow divided by 4, block-averaged: `[2×h×w]`.
    pub flow: Tensor<T>,
    /// Fraction of visible pixels per block: `[1×h×w]`.
    pub vis: Tensor<T>,
}

impl<T: Real> QuarterTarget<T> {
    pub fn from_full(flow: &FlowField, vis: &Mask) -> Result<Self> {
        Ok(QuarterTarget {
            flow: downsample4x(&flow.0.cast(), 0.25)?,
            vis: downsample4x(&vis.to_tensor().cast(), 1.0)?,
        })
    }
}

/// Loss of one frame: `Σ_i γ^{N−i}·mean|fⁱ − gt| + λ·BCE(v, gt_vis)`.
pub fn frame_loss<T: Real>(
    g: &Graph<T>,
    per_iter_flows: &[Var],
    vis_logits: Var,
    target: &QuarterTarget<T>,
    cfg: &LossConfig,
) -> Result<Var> {
    let gt = g.constant(target.flow.clone());
    let n = per_iter_flows.len();
    let mut total = g.bce_with_logits(vis_logits, &target.vis, cfg.bce_eps)?;
    total = g.scale(total, cfg.lambda);
    for (i, &f) in per_iter_flows.iter().enumerate() {
        if g.shape(f) != target.flow.shape() {
            return shape_err(format!("flow {:?} vs target {:?}", g.shape(f), target.flow.shape()));
        }
        let l1 = g.mean(g.abs(g.sub(f, gt)?));
        let weight = cfg.gamma.powi((n - 1 - i) as i32);
        total = g.add(total, g.scale(l1, weight))?;
    }
    Ok(total)
}
