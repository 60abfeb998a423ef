//! Flow rendering with the Middlebury color wheel and occlusion stripes.

use crate::decoder::FlowField;
use crate::tensor::Tensor;

const RY: usize = 15;
const YG: usize = 6;
const GC: usize = 4;
const CB: usize = 11;
const BM: usize = 13;
const MR: usize = 6;

/// The 55 hue anchors of the wheel, as RGB in `[0, 255]`.
pub fn color_wheel() -> Vec<[f64; 3]> {
    let mut wheel = Vec::with_capacity(RY + YG + GC + CB + BM + MR);
    let ramp = |i: usize, n: usize| 255.0 * i as f64 / n as f64;
    wheel.extend((0..RY).map(|i| [255.0, ramp(i, RY), 0.0]));
    wheel.extend((0..YG).map(|i| [255.0 - ramp(i, YG), 255.0, 0.0]));
    wheel.extend((0..GC).map(|i| [0.0, 255.0, ramp(i, GC)]));
    wheel.extend((0..CB).map(|i| [0.0, 255.0 - ramp(i, CB), 255.0]));
    wheel.extend((0..BM).map(|i| [ramp(i, BM), 0.0, 255.0]));
    wheel.extend((0..MR).map(|i| [255.0, 0.0, 255.0 - ramp(i, MR)]));
    wheel
}

/// Color of a flow vector already divided by the normalization radius.
/// Zero motion is white; unit magnitude is the fully saturated hue.
pub fn flow_color(u: f64, v: f64, wheel: &[[f64; 3]]) -> [f64; 3] {
    let n = wheel.len();
    let rad = u.hypot(v);
    let a = (-v).atan2(-u) / std::f64::consts::PI;
    let fk = (a + 1.0) / 2.0 * (n - 1) as f64;
    let k0 = fk.floor() as usize % n;
    let k1 = (k0 + 1) % n;
    let f = fk - fk.floor();
    std::array::from_fn(|c| {
        let col = ((1.0 - f) * wheel[k0][c] + f * wheel[k1][c]) / 255.0;
        if rad <= 1.0 {
            1.0 - rad * (1.0 - col)
        } else {
            col * 0.75
        }
    })
}

/// Renders `flow` as `[3×H×W]` in `[0, 1]`. Magnitudes are divided by
/// `max_flow`, or by the largest magnitude in the image when `None`.
/// Pixels with `occluded[i]` set get dark diagonal stripes.
pub fn render_flow(flow: &FlowField, max_flow: Option<f64>, occluded: Option<&[bool]>) -> Tensor<f32> {
    let (h, w) = (flow.height(), flow.width());
    let n = h * w;
    let d = flow.0.data();
    let max = max_flow.unwrap_or_else(|| (0..n).map(|i| (d[i] as f64).hypot(d[n + i] as f64)).fold(0.0, f64::max));
    let norm = if max > 0.0 { max } else { 1.0 };
    let wheel = color_wheel();
    let mut out = vec![0.0f32; 3 * n];
    for i in 0..n {
        let mut rgb = flow_color(d[i] as f64 / norm, d[n + i] as f64 / norm, &wheel);
        let (x, y) = (i % w, i / w);
        if occluded.is_some_and(|o| o[i]) && (x + y) % 4 < 2 {
            rgb = rgb.map(|c| c * 0.3);
        }
        for c in 0..3 {
            out[c * n + i] = rgb[c] as f32;
        }
    }
    Tensor::new([3, h, w], out).unwrap()
}
