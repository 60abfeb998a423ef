//! Layered moving-shape videos with exact long-range flow and visibility.
//!
//! Objects are textured rectangles and ellipses moving rigidly with constant
//! velocity (and optionally constant angular velocity) over a static
//! textured background. Later objects are nearer to the camera. Ground truth
//! is computed analytically from the motion, never from the rendered images.

mod io;

pub use io::{
    decode_flo, decode_pgm, decode_ppm, encode_flo, encode_pgm, encode_ppm, load_sequence, read_flo, read_pgm, read_ppm,
    save_sequence, write_flo, write_pgm, write_ppm, FLO_MAGIC,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::FlowField;
use crate::encoder::Frame;
use crate::error::{Error, Result};
use crate::tensor::kernels::sample_clamped;
use crate::tensor::Tensor;

/// Random scene parameters. Ranges are inclusive `[lo, hi]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub num_objects: [usize; 2],
    /// Object extent (full width or height) in pixels.
    pub size_range: [f64; 2],
    /// Speed in pixels per frame; the direction is uniform.
    pub speed_range: [f64; 2],
    pub rotation: bool,
    /// Largest angular speed in radians per frame when `rotation` is set.
    pub max_angular_speed: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 64,
            width: 64,
            frames: 24,
            num_objects: [2, 4],
            size_range: [12.0, 28.0],
            speed_range: [0.25, 1.5],
            rotation: false,
            max_angular_speed: 0.02,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.frames == 0 {
            return bad("a sequence needs at least one frame".into());
        }
        if self.height == 0 || self.width == 0 {
            return bad(format!("empty canvas {}x{}", self.height, self.width));
        }
        if self.num_objects[0] > self.num_objects[1] {
            return bad(format!("empty object-count range {:?}", self.num_objects));
        }
        for (name, [lo, hi]) in [("size", self.size_range), ("speed", self.speed_range)] {
            if !(lo <= hi && lo >= 0.0 && hi.is_finite()) {
                return bad(format!("empty or negative {name} range [{lo}, {hi}]"));
            }
        }
        if self.size_range[1] > self.height.min(self.width) as f64 {
            return bad(format!(
                "objects up to {} px do not fit a {}x{} canvas",
                self.size_range[1], self.height, self.width
            ));
        }
        if self.rotation && !(self.max_angular_speed >= 0.0 && self.max_angular_speed.is_finite()) {
            return bad(format!("bad angular speed {}", self.max_angular_speed));
        }
        Ok(())
    }
}

/// Smooth random RGB pattern evaluated at continuous coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Texture {
    /// `[3×h×w]` control grid.
    grid: Tensor<f64>,
    /// Pixel distance between control points.
    cell: f64,
    /// Grid coordinates of the local origin.
    origin: (f64, f64),
}

impl Texture {
    /// Uniform noise around `base` on a grid of `cell`-pixel spacing covering
    /// `[-extent, extent]²`, smoothed once with a 3×3 box.
    pub fn random(rng: &mut impl Rng, base: [f64; 3], amplitude: f64, extent: f64, cell: f64) -> Self {
        let n = (2.0 * extent / cell).ceil() as usize + 4;
        let raw: Vec<f64> = (0..3 * n * n)
            .map(|i| (base[i / (n * n)] + amplitude * rng.gen_range(-1.0..=1.0)).clamp(0.0, 1.0))
            .collect();
        let mut smooth = vec![0.0; raw.len()];
        for c in 0..3 {
            for y in 0..n {
                for x in 0..n {
                    let mut acc = 0.0;
                    for dy in -1isize..=1 {
                        for dx in -1isize..=1 {
                            let sy = (y as isize + dy).clamp(0, n as isize - 1) as usize;
                            let sx = (x as isize + dx).clamp(0, n as isize - 1) as usize;
                            acc += raw[(c * n + sy) * n + sx];
                        }
                    }
                    smooth[(c * n + y) * n + x] = acc / 9.0;
                }
            }
        }
        let mid = (n as f64 - 1.0) / 2.0;
        Texture { grid: Tensor::new([3, n, n], smooth).unwrap(), cell, origin: (mid, mid) }
    }

    pub fn sample(&self, x: f64, y: f64) -> [f64; 3] {
        let (h, w) = (self.grid.dim(1), self.grid.dim(2));
        let gx = self.origin.0 + x / self.cell;
        let gy = self.origin.1 + y / self.cell;
        let d = self.grid.data();
        std::array::from_fn(|c| sample_clamped(&d[c * h * w..(c + 1) * h * w], h, w, gx, gy))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Rect,
    Ellipse,
}

/// One rigid layer. Positions are pixel-center coordinates at frame 0.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub shape: Shape,
    pub center: (f64, f64),
    /// Half extents along the object's local axes.
    pub half: (f64, f64),
    pub velocity: (f64, f64),
    pub angular_velocity: f64,
    pub texture: Texture,
}

impl SceneObject {
    /// Center and rotation angle at frame `t` (0-based).
    fn pose(&self, t: usize) -> ((f64, f64), f64) {
        let t = t as f64;
        ((self.center.0 + t * self.velocity.0, self.center.1 + t * self.velocity.1), t * self.angular_velocity)
    }

    /// Object-local coordinates of canvas point `p` at frame `t`.
    fn to_local(&self, t: usize, p: (f64, f64)) -> (f64, f64) {
        let ((cx, cy), th) = self.pose(t);
        let (dx, dy) = (p.0 - cx, p.1 - cy);
        let (s, c) = th.sin_cos();
        (c * dx + s * dy, -s * dx + c * dy)
    }

    fn to_canvas(&self, t: usize, u: (f64, f64)) -> (f64, f64) {
        let ((cx, cy), th) = self.pose(t);
        let (s, c) = th.sin_cos();
        (cx + c * u.0 - s * u.1, cy + s * u.0 + c * u.1)
    }

    fn contains_local(&self, u: (f64, f64)) -> bool {
        let (a, b) = self.half;
        match self.shape {
            Shape::Rect => u.0.abs() <= a && u.1.abs() <= b,
            Shape::Ellipse => (u.0 / a).powi(2) + (u.1 / b).powi(2) <= 1.0,
        }
    }

    pub fn contains(&self, t: usize, p: (f64, f64)) -> bool {
        self.contains_local(self.to_local(t, p))
    }
}

/// A fully specified scene; `objects` are ordered far to near.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    pub background: Texture,
    pub objects: Vec<SceneObject>,
}

/// Boolean grid `[h×w]`, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Mask { height, width, data: vec![value; height * width] }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// `[1×h×w]` tensor with 1 for true.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new([1, self.height, self.width], self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
            .unwrap()
    }
}

/// Frames with ground-truth flow `1→t` and visibility for every frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceRecord {
    pub frames: Vec<Frame>,
    pub gt_flow: Vec<FlowField>,
    pub gt_vis: Vec<Mask>,
    pub config: SceneConfig,
}

impl SequenceRecord {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// The first `n` frames with their ground truth.
    pub fn prefix(&self, n: usize) -> SequenceRecord {
        let n = n.min(self.len());
        SequenceRecord {
            frames: self.frames[..n].to_vec(),
            gt_flow: self.gt_flow[..n].to_vec(),
            gt_vis: self.gt_vis[..n].to_vec(),
            config: SceneConfig { frames: n, ..self.config.clone() },
        }
    }
}

/// Half-width of the uniform texture noise around each base color.
const TEXTURE_AMPLITUDE: f64 = 0.35;
/// Spacing of texture control points in pixels.
const TEXTURE_CELL: f64 = 2.0;

fn random_color(rng: &mut impl Rng) -> [f64; 3] {
    std::array::from_fn(|_| rng.gen_range(0.15..=0.85))
}

/// Samples a scene from `config`.
pub fn sample_scene(config: &SceneConfig) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (h, w) = (config.height as f64, config.width as f64);
    let extent = h.hypot(w);
    let base = random_color(&mut rng);
    let background = Texture::random(&mut rng, base, TEXTURE_AMPLITUDE, extent, TEXTURE_CELL);
    let count = rng.gen_range(config.num_objects[0]..=config.num_objects[1]);
    let uniform = |rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]| if lo == hi { lo } else { rng.gen_range(lo..=hi) };
    let objects = (0..count)
        .map(|_| {
            let shape = if rng.gen_bool(0.5) { Shape::Rect } else { Shape::Ellipse };
            let half = (uniform(&mut rng, config.size_range) / 2.0, uniform(&mut rng, config.size_range) / 2.0);
            let center = (rng.gen_range(0.0..w), rng.gen_range(0.0..h));
            let speed = uniform(&mut rng, config.speed_range);
            let dir = rng.gen_range(0.0..std::f64::consts::TAU);
            let angular_velocity = if config.rotation && config.max_angular_speed > 0.0 {
                rng.gen_range(-config.max_angular_speed..=config.max_angular_speed)
            } else {
                0.0
            };
            let base = random_color(&mut rng);
            let texture = Texture::random(&mut rng, base, TEXTURE_AMPLITUDE, half.0.hypot(half.1) + 2.0, TEXTURE_CELL);
            SceneObject { shape, center, half, velocity: (speed * dir.cos(), speed * dir.sin()), angular_velocity, texture }
        })
        .collect();
    Ok(Scene { height: config.height, width: config.width, background, objects })
}

/// Quantizes to the 8-bit grid so that image files round-trip exactly.
fn quantize(v: f64) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0
}

/// Renders `frames` frames of `scene` with analytic ground truth.
pub fn render(scene: &Scene, frames: usize) -> (Vec<Frame>, Vec<FlowField>, Vec<Mask>) {
    let (h, w) = (scene.height, scene.width);
    let topmost = |t: usize, p: (f64, f64)| scene.objects.iter().rposition(|o| o.contains(t, p));
    let owners: Vec<Option<usize>> =
        (0..h * w).map(|i| topmost(0, ((i % w) as f64, (i / w) as f64))).collect();
    let mut out_frames = Vec::with_capacity(frames);
    let mut flows = Vec::with_capacity(frames);
    let mut masks = Vec::with_capacity(frames);
    for t in 0..frames {
        let mut img = vec![0.0f32; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let p = (x as f64, y as f64);
                let rgb = match topmost(t, p) {
                    Some(i) => {
                        let u = scene.objects[i].to_local(t, p);
                        scene.objects[i].texture.sample(u.0, u.1)
                    }
                    None => scene.background.sample(p.0, p.1),
                };
                for c in 0..3 {
                    img[(c * h + y) * w + x] = quantize(rgb[c]);
                }
            }
        }
        out_frames.push(Frame::new(Tensor::new([3, h, w], img).unwrap()).unwrap());

        let mut flow = vec![0.0f32; 2 * h * w];
        let mut vis = vec![true; h * w];
        for (i, owner) in owners.iter().enumerate() {
            let p = ((i % w) as f64, (i / w) as f64);
            let (q, nearer_from) = match *owner {
                Some(k) => {
                    let o = &scene.objects[k];
                    (o.to_canvas(t, o.to_local(0, p)), k + 1)
                }
                None => (p, 0),
            };
            flow[i] = (q.0 - p.0) as f32;
            flow[h * w + i] = (q.1 - p.1) as f32;
            let inside = q.0 >= 0.0 && q.1 >= 0.0 && q.0 <= (w - 1) as f64 && q.1 <= (h - 1) as f64;
            let covered = scene.objects[nearer_from..].iter().any(|o| o.contains(t, q));
            vis[i] = inside && !covered;
        }
        flows.push(FlowField(Tensor::new([2, h, w], flow).unwrap()));
        masks.push(Mask { height: h, width: w, data: vis });
    }
    (out_frames, flows, masks)
}

/// Samples and renders one sequence; deterministic in `config.seed`.
pub fn generate(config: &SceneConfig) -> Result<SequenceRecord> {
    let scene = sample_scene(config)?;
    let (frames, gt_flow, gt_vis) = render(&scene, config.frames);
    Ok(SequenceRecord { frames, gt_flow, gt_vis, config: config.clone() })
}

/// A static sequence: `frames` copies of the first frame of `config`'s scene,
/// zero flow, everything visible.
pub fn generate_static(config: &SceneConfig) -> Result<SequenceRecord> {
    let scene = sample_scene(config)?;
    let (first, _, _) = render(&scene, 1);
    let (h, w) = (config.height, config.width);
    Ok(SequenceRecord {
        frames: vec![first[0].clone(); config.frames],
        gt_flow: vec![FlowField::zeros(h, w); config.frames],
        gt_vis: vec![Mask::filled(h, w, true); config.frames],
        config: config.clone(),
    })
}
