//! Dense flow metrics (EPE per region, occlusion accuracy) and point-track
//! metrics (δ-average position accuracy, Average Jaccard).

use std::fmt;

use crate::decoder::FlowField;
use crate::error::{shape_err, Error, Result};
use crate::synth::Mask;
use crate::tensor::kernels::sample_clamped;
use crate::tensor::Tensor;

/// Probability above which a point counts as visible.
pub const VIS_THRESHOLD: f64 = 0.5;

/// Pixel thresholds of the δ-average and Average Jaccard.
pub const TAP_THRESHOLDS: [f64; 5] = [1.0, 2.0, 4.0, 8.0, 16.0];

/// End-point errors in pixels and occlusion accuracy. A region without
/// pixels has no EPE (`None`), not zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowMetrics {
    pub epe_all: f64,
    pub epe_vis: Option<f64>,
    pub epe_occ: Option<f64>,
    pub oa: f64,
}

impl fmt::Display for FlowMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        write!(
            f,
            "epe_all={:.4} epe_vis={} epe_occ={} oa={:.4}",
            self.epe_all,
            opt(self.epe_vis),
            opt(self.epe_occ),
            self.oa
        )
    }
}

/// Pixel-weighted accumulation of [`FlowMetrics`] over many frames.
#[derive(Clone, Debug, Default)]
pub struct FlowAccumulator {
    sum_vis: f64,
    sum_occ: f64,
    n_vis: usize,
    n_occ: usize,
    correct: usize,
}

impl FlowAccumulator {
    pub fn add(&mut self, pred: &FlowField, pred_vis_prob: &Tensor<f32>, gt: &FlowField, gt_vis: &Mask) -> Result<()> {
        let (h, w) = (gt.height(), gt.width());
        if pred.0.shape() != gt.0.shape()
            || pred_vis_prob.shape() != [1, h, w]
            || (gt_vis.height, gt_vis.width) != (h, w)
        {
            return shape_err(format!(
                "metric inputs disagree: pred {:?}, vis {:?}, gt {:?}, mask {}x{}",
                pred.0.shape(),
                pred_vis_prob.shape(),
                gt.0.shape(),
                gt_vis.height,
                gt_vis.width
            ));
        }
        let n = h * w;
        let (p, g) = (pred.0.data(), gt.0.data());
        for i in 0..n {
            let du = (p[i] - g[i]) as f64;
            let dv = (p[n + i] - g[n + i]) as f64;
            let e = du.hypot(dv);
            let visible = gt_vis.data[i];
            if visible {
                self.sum_vis += e;
                self.n_vis += 1;
            } else {
                self.sum_occ += e;
                self.n_occ += 1;
            }
            if (pred_vis_prob.data()[i] as f64 > VIS_THRESHOLD) == visible {
                self.correct += 1;
            }
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.n_vis + self.n_occ
    }

    pub fn finish(&self) -> Result<FlowMetrics> {
        let n = self.count();
        if n == 0 {
            return Err(Error::Contract("no pixels were accumulated".into()));
        }
        let mean = |s: f64, k: usize| (k > 0).then(|| s / k as f64);
        Ok(FlowMetrics {
            epe_all: (self.sum_vis + self.sum_occ) / n as f64,
            epe_vis: mean(self.sum_vis, self.n_vis),
            epe_occ: mean(self.sum_occ, self.n_occ),
            oa: self.correct as f64 / n as f64,
        })
    }
}

/// Metrics of one predicted flow/visibility pair against ground truth.
pub fn flow_metrics(pred: &FlowField, pred_vis_prob: &Tensor<f32>, gt: &FlowField, gt_vis: &Mask) -> Result<FlowMetrics> {
    let mut acc = FlowAccumulator::default();
    acc.add(pred, pred_vis_prob, gt, gt_vis)?;
    acc.finish()
}

/// Point tracks indexed `[query][frame]`; frame 0 is the query frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Tracks {
    pub positions: Vec<Vec<(f64, f64)>>,
    pub occluded: Vec<Vec<bool>>,
}

impl Tracks {
    pub fn num_queries(&self) -> usize {
        self.positions.len()
    }

    fn check(&self, other: &Tracks) -> Result<()> {
        let frames = |t: &Tracks| t.positions.iter().map(Vec::len).chain(t.occluded.iter().map(Vec::len)).collect::<Vec<_>>();
        if self.positions.len() != other.positions.len()
            || self.occluded.len() != self.positions.len()
            || other.occluded.len() != other.positions.len()
            || frames(self) != frames(other)
        {
            return shape_err("prediction and ground-truth tracks differ in query or frame counts");
        }
        Ok(())
    }
}

/// Position and visibility accuracy of point tracks, all in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TapMetrics {
    pub aj: f64,
    pub delta_avg: f64,
    pub oa: f64,
}

impl fmt::Display for TapMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "aj={:.4} delta_avg={:.4} oa={:.4}", self.aj, self.delta_avg, self.oa)
    }
}

/// Scores every (query, frame ≥ 1) pair. A point is within δ when its
/// distance to the truth is strictly below δ. Per threshold, Jaccard is
/// `TP / (TP + FP + FN)` with TP = visible, predicted visible and within δ;
/// FP = predicted visible but occluded or not within δ; FN = visible but
/// predicted occluded or not within δ.
pub fn tap_metrics(pred: &Tracks, gt: &Tracks, thresholds: &[f64]) -> Result<TapMetrics> {
    pred.check(gt)?;
    if thresholds.is_empty() {
        return Err(Error::Contract("no thresholds given".into()));
    }
    let mut n_points = 0usize;
    let mut n_visible = 0usize;
    let mut occ_correct = 0usize;
    let mut within = vec![0usize; thresholds.len()];
    let mut jac = vec![(0usize, 0usize, 0usize); thresholds.len()];
    for q in 0..gt.num_queries() {
        for t in 1..gt.positions[q].len() {
            let gv = !gt.occluded[q][t];
            let pv = !pred.occluded[q][t];
            let (px, py) = pred.positions[q][t];
            let (gx, gy) = gt.positions[q][t];
            let dist2 = (px - gx).powi(2) + (py - gy).powi(2);
            n_points += 1;
            n_visible += gv as usize;
            occ_correct += (gv == pv) as usize;
            for (k, &d) in thresholds.iter().enumerate() {
                let close = dist2 < d * d;
                if gv && close {
                    within[k] += 1;
                }
                let (tp, fp, fne) = &mut jac[k];
                *tp += (gv && pv && close) as usize;
                *fp += (pv && !(gv && close)) as usize;
                *fne += (gv && !(pv && close)) as usize;
            }
        }
    }
    if n_visible == 0 {
        return Err(Error::Domain("no visible ground-truth points after the query frame".into()));
    }
    let k = thresholds.len() as f64;
    let delta_avg = within.iter().map(|&w| w as f64 / n_visible as f64).sum::<f64>() / k;
    let aj = jac
        .iter()
        .map(|&(tp, fp, fne)| {
            let denom = tp + fp + fne;
            if denom == 0 { 1.0 } else { tp as f64 / denom as f64 }
        })
        .sum::<f64>()
        / k;
    Ok(TapMetrics { aj, delta_avg, oa: occ_correct as f64 / n_points as f64 })
}

/// Reads point tracks out of dense first-frame flow. Each query `q` maps to
/// `q + flow_t(q)` (bilinear) and is occluded where the sampled visibility
/// is at most [`VIS_THRESHOLD`].
pub fn dense_to_queries(flows: &[FlowField], vis: &[Tensor<f32>], queries: &[(f64, f64)]) -> Result<Tracks> {
    if flows.len() != vis.len() {
        return shape_err(format!("{} flow fields but {} visibility maps", flows.len(), vis.len()));
    }
    let mut tracks = Tracks {
        positions: vec![Vec::with_capacity(flows.len()); queries.len()],
        occluded: vec![Vec::with_capacity(flows.len()); queries.len()],
    };
    for (flow, v) in flows.iter().zip(vis) {
        let (h, w) = (flow.height(), flow.width());
        if v.shape() != [1, h, w] {
            return shape_err(format!("visibility {:?} does not match flow {h}x{w}", v.shape()));
        }
        let f64s: Vec<f64> = flow.0.data().iter().map(|&x| x as f64).collect();
        let v64: Vec<f64> = v.data().iter().map(|&x| x as f64).collect();
        for (qi, &(x, y)) in queries.iter().enumerate() {
            if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
                return Err(Error::Contract(format!("query ({x}, {y}) lies outside the {w}x{h} frame")));
            }
            let u = sample_clamped(&f64s[..h * w], h, w, x, y);
            let dv = sample_clamped(&f64s[h * w..], h, w, x, y);
            tracks.positions[qi].push((x + u, y + dv));
            tracks.occluded[qi].push(sample_clamped(&v64, h, w, x, y) <= VIS_THRESHOLD);
        }
    }
    Ok(tracks)
}
