//! End-to-end acceptance run. Every criterion prints one `PASS`/`FAIL` line.
//! The test fails if any of the exact criteria 1-6 fails.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicIsize, Ordering};
use std::time::{Duration, Instant};

use densetrack::autodiff::{grad_check, Graph, Var};
use densetrack::config::ModelConfig;
use densetrack::decoder::{build_correlation, lookup, FlowField, MotionEncoder, UpdateBlock};
use densetrack::memory::{self, Fusion, MemoryBank};
use densetrack::metrics::{flow_metrics, tap_metrics, Tracks, TAP_THRESHOLDS};
use densetrack::nn::{gru_cell, GruParams, ParamVars, Params};
use densetrack::splatting::{splat, splat_var, SplatConfig, SplatMode};
use densetrack::synth::{self, Mask, SceneConfig, SequenceRecord};
use densetrack::tensor::Tensor;
use densetrack::tracker::{warm_start, Model};
use densetrack::trainer::{evaluate, run_ablation_grid, train, zero_flow_epe, AblationRow, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Writes straight to the process stdout so the report shows up even when the
/// harness captures test output.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, $($arg)*);
        let _ = out.flush();
    }};
}

struct Counting;

static LIVE_BYTES: AtomicIsize = AtomicIsize::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        LIVE_BYTES.fetch_add(layout.size() as isize, Ordering::Relaxed);
        System.alloc(layout)
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        LIVE_BYTES.fetch_sub(layout.size() as isize, Ordering::Relaxed);
        System.dealloc(ptr, layout)
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        LIVE_BYTES.fetch_add(layout.size() as isize, Ordering::Relaxed);
        System.alloc_zeroed(layout)
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        LIVE_BYTES.fetch_add(new_size as isize - layout.size() as isize, Ordering::Relaxed);
        System.realloc(ptr, layout, new_size)
    }
}

#[global_allocator]
static GLOBAL: Counting = Counting;

type Outcome = Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(shape: &[usize], lo: f64, hi: f64, r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), lo, hi, r)
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- criterion 1

fn params_vars(names: &[String], vars: &[Var]) -> ParamVars {
    names.iter().cloned().zip(vars.iter().copied()).collect()
}

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let tol = 1e-4;
    let mut r = rng(1);
    let mut reports = Vec::new();

    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        let x = uniform(&[2, 5, 6], -1.0, 1.0, &mut r);
        let w = uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut r);
        let b = uniform(&[3], -1.0, 1.0, &mut r);
        let name = format!("conv2d s{stride} p{pad}");
        reports.push(grad_check(&name, |g, v| g.conv2d(v[0], v[1], v[2], stride, pad), &[x, w, b], tol));
    }

    let gru_inputs: Vec<Tensor<f64>> = vec![
        uniform(&[2, 4, 4], -1.0, 1.0, &mut r),
        uniform(&[2, 4, 4], -1.0, 1.0, &mut r),
        uniform(&[2, 4, 3, 3], -0.5, 0.5, &mut r),
        uniform(&[2], -0.5, 0.5, &mut r),
        uniform(&[2, 4, 3, 3], -0.5, 0.5, &mut r),
        uniform(&[2], -0.5, 0.5, &mut r),
        uniform(&[2, 4, 3, 3], -0.5, 0.5, &mut r),
        uniform(&[2], -0.5, 0.5, &mut r),
    ];
    reports.push(grad_check(
        "gru_cell",
        |g, v| {
            let p = GruParams {
                update_w: v[2],
                update_b: v[3],
                reset_w: v[4],
                reset_b: v[5],
                cand_w: v[6],
                cand_b: v[7],
            };
            gru_cell(g, v[0], v[1], &p)
        },
        &gru_inputs,
        tol,
    ));

    let attn_inputs = vec![
        uniform(&[6, 3], -1.0, 1.0, &mut r),
        uniform(&[6, 3], -1.0, 1.0, &mut r),
        uniform(&[6, 2], -1.0, 1.0, &mut r),
        uniform(&[6, 3], -1.0, 1.0, &mut r),
        uniform(&[6, 2], -1.0, 1.0, &mut r),
    ];
    reports.push(grad_check(
        "attention read",
        |g, v| {
            let mut bank = MemoryBank::new(3);
            memory::write_var(g, &mut bank, v[1], v[2])?;
            memory::write_var(g, &mut bank, v[3], v[4])?;
            memory::read(g, &bank, v[0], 2, 3)
        },
        &attn_inputs,
        tol,
    ));

    let grid = uniform(&[2, 4, 5], -1.0, 1.0, &mut r);
    let coords = Tensor::from_fn([2, 3, 3], |i| if i < 9 { r.gen_range(-0.8..4.8) } else { r.gen_range(-0.8..3.8) });
    reports.push(grad_check("bilinear_sample", |g, v| g.bilinear_sample(v[0], v[1]), &[grid, coords], tol));

    for mode in SplatMode::ALL {
        let src = uniform(&[2, 5, 5], -1.0, 1.0, &mut r);
        let flow = uniform(&[2, 5, 5], -1.5, 1.5, &mut r);
        let vis = uniform(&[1, 5, 5], 0.2, 1.0, &mut r);
        let cfg = SplatConfig::default();
        reports.push(grad_check(
            &format!("splat {}", mode.name()),
            move |g, v| Ok(splat_var(g, v[0], v[1], v[2], mode, &cfg)?.0),
            &[src, flow, vis],
            tol,
        ));
    }

    let pyr_inputs = vec![uniform(&[3, 4, 4], -1.0, 1.0, &mut r), uniform(&[3, 4, 4], -1.0, 1.0, &mut r)];
    let lk_flow = uniform(&[2, 4, 4], -1.3, 1.3, &mut r);
    reports.push(grad_check(
        "correlation lookup",
        move |g, v| {
            let pyr = build_correlation(g, v[0], v[1], 2)?;
            lookup(g, &pyr, &lk_flow, 1)
        },
        &pyr_inputs,
        tol,
    ));

    let enc = MotionEncoder::new(4, 4);
    let mut p: Params<f64> = Params::new();
    enc.init(&mut p, &mut r);
    let names: Vec<String> = p.iter().map(|(k, _)| k.clone()).collect();
    let mut inputs = vec![
        uniform(&[2, 4, 4], -2.0, 2.0, &mut r),
        uniform(&[1, 4, 4], -2.0, 2.0, &mut r),
        uniform(&[4, 4, 4], -1.0, 1.0, &mut r),
    ];
    inputs.extend(p.iter().map(|(_, t)| t.clone()));
    reports.push(grad_check(
        "encode_motion",
        |g, v| enc.forward(g, &params_vars(&names, &v[3..]), v[0], v[1], v[2]),
        &inputs,
        tol,
    ));

    let upd = UpdateBlock::new(3, 6, 3);
    let mut p: Params<f64> = Params::new();
    upd.init(&mut p, &mut r);
    let names: Vec<String> = p.iter().map(|(k, _)| k.clone()).collect();
    let mut inputs = vec![
        uniform(&[3, 4, 4], -1.0, 1.0, &mut r),
        uniform(&[2, 4, 4], -1.0, 1.0, &mut r),
        uniform(&[2, 4, 4], -1.0, 1.0, &mut r),
        uniform(&[2, 4, 4], -1.0, 1.0, &mut r),
    ];
    inputs.extend(p.iter().map(|(_, t)| t.clone()));
    reports.push(grad_check(
        "gru_update",
        |g, v| {
            let (df, dv, h) = upd.forward(g, &params_vars(&names, &v[4..]), v[0], v[1], v[2], Some(v[3]))?;
            g.concat(&[df, dv, h])
        },
        &inputs,
        tol,
    ));

    let mut worst = 0.0f64;
    for rep in reports {
        let rep = rep.map_err(|e| e.to_string())?;
        say!("    {rep}");
        ensure(rep.passed, || format!("{rep}"))?;
        worst = worst.max(rep.max_rel_error);
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(120), || format!("took {elapsed:?}"))?;
    Ok(format!("worst rel error {worst:.2e}, {:.1}s", elapsed.as_secs_f64()))
}

// ---------------------------------------------------------------- criterion 2

/// Scatter oracle: every source pixel visits every target pixel.
fn splat_oracle(src: &Tensor<f64>, flow: &Tensor<f64>, vis: &Tensor<f64>, mode: SplatMode, eps: f64, alpha: f64) -> Vec<f64> {
    let (c, h, w) = (src.dim(0), src.dim(1), src.dim(2));
    let mut num = vec![0.0; c * h * w];
    let mut den = vec![0.0; h * w];
    for sy in 0..h {
        for sx in 0..w {
            let tx = sx as f64 + flow.at(&[0, sy, sx]);
            let ty = sy as f64 + flow.at(&[1, sy, sx]);
            let m = match mode {
                SplatMode::Summation | SplatMode::Average => 1.0,
                SplatMode::Linear => vis.at(&[0, sy, sx]),
                SplatMode::Softmax => (alpha * vis.at(&[0, sy, sx])).exp(),
            };
            for y in 0..h {
                for x in 0..w {
                    let b = (1.0 - (tx - x as f64).abs()).max(0.0) * (1.0 - (ty - y as f64).abs()).max(0.0);
                    den[y * w + x] += b * m;
                    for ch in 0..c {
                        num[(ch * h + y) * w + x] += b * m * src.at(&[ch, sy, sx]);
                    }
                }
            }
        }
    }
    for ch in 0..c {
        for i in 0..h * w {
            let v = &mut num[ch * h * w + i];
            if den[i] < eps {
                *v = 0.0;
            } else if mode != SplatMode::Summation {
                *v /= den[i];
            }
        }
    }
    num
}

fn splatting_oracle() -> Outcome {
    let cfg = SplatConfig::default();
    let mut r = rng(2);
    let mut worst = 0.0f64;
    for mode in SplatMode::ALL {
        for _ in 0..100 {
            let (c, h, w) = (r.gen_range(1..=3), r.gen_range(1..=16), r.gen_range(1..=16));
            let src = uniform(&[c, h, w], -2.0, 2.0, &mut r);
            let flow = uniform(&[2, h, w], -3.0, 3.0, &mut r);
            let vis = uniform(&[1, h, w], 0.0, 1.0, &mut r);
            let got = splat(&src, &flow, Some(&vis), mode, &cfg).map_err(|e| e.to_string())?;
            let want = splat_oracle(&src, &flow, &vis, mode, cfg.eps_hole, cfg.softmax_alpha);
            for (a, b) in got.value.data().iter().zip(&want) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    ensure(worst <= 1e-6, || format!("oracle mismatch {worst:.3e}"))?;

    let src = uniform(&[3, 7, 9], -2.0, 2.0, &mut r);
    let zero = Tensor::zeros([2, 7, 9]);
    let ones = Tensor::ones([1, 7, 9]);
    for mode in [SplatMode::Average, SplatMode::Linear] {
        let out = splat(&src, &zero, Some(&ones), mode, &cfg).map_err(|e| e.to_string())?;
        ensure(out.value == src, || format!("{} zero-flow splat is not the identity", mode.name()))?;
    }

    let mut worst_mass = 0.0f64;
    for _ in 0..100 {
        let (h, w) = (r.gen_range(2..=16), r.gen_range(2..=16));
        let src = uniform(&[2, h, w], -2.0, 2.0, &mut r);
        let mut flow = Tensor::zeros([2, h, w]);
        for y in 0..h {
            for x in 0..w {
                let lo_x = (-(x as f64)).max(-3.0);
                let hi_x = ((w - 1 - x) as f64).min(3.0);
                let lo_y = (-(y as f64)).max(-3.0);
                let hi_y = ((h - 1 - y) as f64).min(3.0);
                flow.set(&[0, y, x], r.gen_range(lo_x..=hi_x));
                flow.set(&[1, y, x], r.gen_range(lo_y..=hi_y));
            }
        }
        let out = splat(&src, &flow, None, SplatMode::Summation, &cfg).map_err(|e| e.to_string())?;
        worst_mass = worst_mass.max((out.weight.sum() - (h * w) as f64).abs());
    }
    ensure(worst_mass <= 1e-5, || format!("mass drift {worst_mass:.3e}"))?;
    Ok(format!("max oracle error {worst:.2e}, max mass drift {worst_mass:.2e}"))
}

// ---------------------------------------------------------------- criterion 3

fn brute_attention(keys: &[Tensor<f64>], values: &[Tensor<f64>], q: &Tensor<f64>) -> Vec<f64> {
    let (rows, dk) = (q.dim(0), q.dim(1));
    let dv = values[0].dim(1);
    let mut out = vec![0.0; rows * dv];
    for i in 0..rows {
        let mut scores = Vec::new();
        for (k, v) in keys.iter().zip(values) {
            for j in 0..k.dim(0) {
                let s: f64 = (0..dk).map(|d| q.at(&[i, d]) * k.at(&[j, d])).sum::<f64>() / (dk as f64).sqrt();
                scores.push((s, (0..dv).map(|c| v.at(&[j, c])).collect::<Vec<_>>()));
            }
        }
        let m = scores.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s.0 - m).exp()).sum();
        for (s, v) in &scores {
            let a = (s - m).exp() / z;
            for c in 0..dv {
                out[i * dv + c] += a * v[c];
            }
        }
    }
    out
}

fn memory_semantics() -> Outcome {
    let mut bank = MemoryBank::new(3);
    for i in 1..=5 {
        bank.push(i, 100 + i);
    }
    let keys: Vec<i32> = bank.keys().copied().collect();
    ensure(keys == vec![3, 4, 5], || format!("FIFO kept {keys:?}"))?;
    let vals: Vec<i32> = bank.values().copied().collect();
    ensure(vals == vec![103, 104, 105], || format!("FIFO values {vals:?}"))?;

    let mut r = rng(3);
    let mut worst = 0.0f64;
    let mut worst_perm = 0.0f64;
    for _ in 0..50 {
        let (h, w) = (r.gen_range(1..=4), r.gen_range(1..=4));
        let (dk, dv) = (r.gen_range(1..=5), r.gen_range(1..=4));
        let n = r.gen_range(1..=3);
        let keys: Vec<_> = (0..n).map(|_| uniform(&[h * w, dk], -2.0, 2.0, &mut r)).collect();
        let values: Vec<_> = (0..n).map(|_| uniform(&[h * w, dv], -2.0, 2.0, &mut r)).collect();
        let q = uniform(&[h * w, dk], -2.0, 2.0, &mut r);
        let mut bank = MemoryBank::new(3);
        for (k, v) in keys.iter().zip(&values) {
            bank.write(k.clone(), v.clone()).map_err(|e| e.to_string())?;
        }
        let got = memory::read_tensor_bank(&bank, &q, h, w).map_err(|e| e.to_string())?;
        let want = brute_attention(&keys, &values, &q);
        for i in 0..h * w {
            for c in 0..dv {
                worst = worst.max((got.at(&[c, i / w, i % w]) - want[i * dv + c]).abs());
            }
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.reverse();
        order.rotate_left(r.gen_range(0..n));
        let mut permuted = MemoryBank::new(3);
        for &i in &order {
            permuted.write(keys[i].clone(), values[i].clone()).map_err(|e| e.to_string())?;
        }
        let again = memory::read_tensor_bank(&permuted, &q, h, w).map_err(|e| e.to_string())?;
        for (a, b) in got.data().iter().zip(again.data()) {
            worst_perm = worst_perm.max((a - b).abs());
        }
    }
    ensure(worst <= 1e-6, || format!("attention oracle mismatch {worst:.3e}"))?;
    ensure(worst_perm <= 1e-12, || format!("read depends on entry order ({worst_perm:.3e})"))?;

    let fusion = Fusion::new(4, 3, 3);
    let mut p: Params<f64> = Params::new();
    fusion.init(&mut p, &mut r);
    for (_, t) in p.iter_mut() {
        t.data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    let g = Graph::<f64>::no_grad();
    let vars = p.bind(&g, false);
    let f = uniform(&[4, 3, 5], -2.0, 2.0, &mut r);
    let readout = uniform(&[3, 3, 5], -2.0, 2.0, &mut r);
    let fv = g.constant(f.clone());
    let rv = g.constant(readout);
    let fused = fusion.forward(&g, &vars, fv, rv).map_err(|e| e.to_string())?;
    ensure(*g.value(fused) == f, || "zero-weight fusion changed the features".into())?;
    Ok(format!("attention error {worst:.2e}, permutation drift {worst_perm:.2e}"))
}

// ---------------------------------------------------------------- criterion 4

fn warm_start_rule() -> Outcome {
    let prev_init = Tensor::new([2, 1, 2], vec![1.0f64, 2.0, -1.0, 0.5]).unwrap();
    let prev_final = Tensor::new([2, 1, 2], vec![3.0f64, 1.0, 0.0, 0.5]).unwrap();
    let got = warm_start(&prev_init, &prev_final).map_err(|e| e.to_string())?;
    ensure(got.data() == [5.0, 0.0, 1.0, 0.5], || format!("warm start gave {:?}", got.data()))?;

    // The tracker applies the same rule between consecutive frames.
    let model = Model::new(ModelConfig::toy()).map_err(|e| e.to_string())?;
    let params = model.init_params::<f32>(&mut rng(4));
    let seq = synth::generate(&SceneConfig { height: 32, width: 32, frames: 4, seed: 4, ..SceneConfig::default() })
        .map_err(|e| e.to_string())?;
    let (mut state, _) = model.init(&params, &seq.frames[0]).map_err(|e| e.to_string())?;
    for frame in &seq.frames[1..] {
        let expected = warm_start(&state.prev_init, &state.prev_final).map_err(|e| e.to_string())?;
        let (next, _) = model.step(&params, state, frame, 2).map_err(|e| e.to_string())?;
        ensure(next.prev_init == expected, || "tracker initialization differs from the warm-start rule".into())?;
        state = next;
    }
    Ok("hand vectors and tracker initializations exact".into())
}

// ---------------------------------------------------------------- criterion 5

fn causality() -> Outcome {
    let model = Model::new(ModelConfig::toy()).map_err(|e| e.to_string())?;
    let mut checked = 0;
    for seed in 0..2u64 {
        let params = model.init_params::<f32>(&mut rng(50 + seed));
        let seq = synth::generate(&SceneConfig { height: 32, width: 40, frames: 12, seed, ..SceneConfig::default() })
            .map_err(|e| e.to_string())?;
        let full = model.track_sequence(&params, &seq.frames, 3).map_err(|e| e.to_string())?;
        for k in [1, 4, 7, 11] {
            let prefix = model.track_sequence(&params, &seq.frames[..k], 3).map_err(|e| e.to_string())?;
            for (i, (a, b)) in prefix.iter().zip(&full).enumerate() {
                ensure(a == b, || format!("seed {seed}: prefix {k} differs at frame {i}"))?;
                checked += 1;
            }
        }
    }

    let params = model.init_params::<f32>(&mut rng(60));
    let seq = synth::generate(&SceneConfig { height: 32, width: 32, frames: 100, seed: 9, ..SceneConfig::default() })
        .map_err(|e| e.to_string())?;
    let (mut state, _) = model.init(&params, &seq.frames[0]).map_err(|e| e.to_string())?;
    let mut live = Vec::new();
    let mut footprint = Vec::new();
    for frame in &seq.frames[1..] {
        let (next, out) = model.step(&params, state, frame, 2).map_err(|e| e.to_string())?;
        drop(out);
        state = next;
        live.push(LIVE_BYTES.load(Ordering::Relaxed));
        footprint.push(state.footprint());
    }
    // the bank fills during the first frames; compare from then on
    let settled = &live[model.config().memory_len + 1..];
    let base = settled[0] as f64;
    let spread = settled.iter().map(|&b| (b as f64 - base).abs() / base).fold(0.0, f64::max);
    ensure(spread <= 0.05, || format!("live heap drifted {:.2}% over 100 frames", spread * 100.0))?;
    let fp = &footprint[model.config().memory_len + 1..];
    ensure(fp.iter().all(|&f| f == fp[0]), || "state footprint changed".into())?;
    Ok(format!("{checked} prefix frames bitwise equal; live heap spread {:.3}%", spread * 100.0))
}

// ---------------------------------------------------------------- criterion 6

fn naive_flow(pred: &[f32], vis: &[f32], gt: &[f32], mask: &[bool], n: usize) -> (f64, Option<f64>, Option<f64>, f64) {
    let (mut all, mut sv, mut so, mut nv, mut no, mut ok) = (0.0, 0.0, 0.0, 0, 0, 0);
    for i in 0..n {
        let e = (((pred[i] - gt[i]) as f64).powi(2) + ((pred[n + i] - gt[n + i]) as f64).powi(2)).sqrt();
        all += e;
        if mask[i] {
            sv += e;
            nv += 1;
        } else {
            so += e;
            no += 1;
        }
        if (vis[i] as f64 > 0.5) == mask[i] {
            ok += 1;
        }
    }
    let avg = |s: f64, k: usize| if k == 0 { None } else { Some(s / k as f64) };
    (all / n as f64, avg(sv, nv), avg(so, no), ok as f64 / n as f64)
}

fn naive_tap(pred: &Tracks, gt: &Tracks) -> (f64, f64, f64) {
    let mut aj = 0.0;
    let mut delta = 0.0;
    let (mut agree, mut total) = (0.0, 0.0);
    for &thr in &TAP_THRESHOLDS {
        let (mut tp, mut fp, mut fneg, mut hit, mut vis) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for q in 0..gt.positions.len() {
            for t in 1..gt.positions[q].len() {
                let d = ((pred.positions[q][t].0 - gt.positions[q][t].0).powi(2)
                    + (pred.positions[q][t].1 - gt.positions[q][t].1).powi(2))
                .sqrt();
                let g_vis = !gt.occluded[q][t];
                let p_vis = !pred.occluded[q][t];
                let near = d < thr;
                if g_vis {
                    vis += 1.0;
                    if near {
                        hit += 1.0;
                    }
                }
                if g_vis && p_vis && near {
                    tp += 1.0;
                } else {
                    if p_vis {
                        fp += 1.0;
                    }
                    if g_vis {
                        fneg += 1.0;
                    }
                }
            }
        }
        aj += if tp + fp + fneg == 0.0 { 1.0 } else { tp / (tp + fp + fneg) };
        delta += hit / vis;
    }
    for q in 0..gt.positions.len() {
        for t in 1..gt.positions[q].len() {
            total += 1.0;
            if gt.occluded[q][t] == pred.occluded[q][t] {
                agree += 1.0;
            }
        }
    }
    let k = TAP_THRESHOLDS.len() as f64;
    (aj / k, delta / k, agree / total)
}

fn metrics_oracles() -> Outcome {
    let mut r = rng(6);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (h, w) = (r.gen_range(1..=8), r.gen_range(1..=8));
        let n = h * w;
        let pred = Tensor::<f32>::uniform([2, h, w], -5.0, 5.0, &mut r);
        let gt = Tensor::<f32>::uniform([2, h, w], -5.0, 5.0, &mut r);
        let vis = Tensor::<f32>::uniform([1, h, w], 0.0, 1.0, &mut r);
        let mask = Mask { height: h, width: w, data: (0..n).map(|_| r.gen_bool(0.6)).collect() };
        let got = flow_metrics(&FlowField(pred.clone()), &vis, &FlowField(gt.clone()), &mask).map_err(|e| e.to_string())?;
        let (all, v, o, oa) = naive_flow(pred.data(), vis.data(), gt.data(), &mask.data, n);
        worst = worst.max((got.epe_all - all).abs()).max((got.oa - oa).abs());
        for (a, b) in [(got.epe_vis, v), (got.epe_occ, o)] {
            match (a, b) {
                (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
                (None, None) => {}
                _ => return Err("region presence differs from the naive loop".into()),
            }
        }

        let (nq, nt) = (r.gen_range(1..=6), r.gen_range(2..=6));
        let mk = |r: &mut ChaCha8Rng, jitter: f64, base: Option<&Tracks>| Tracks {
            positions: (0..nq)
                .map(|q| {
                    (0..nt)
                        .map(|t| {
                            let (x, y) = base.map_or((r.gen_range(0.0..20.0), r.gen_range(0.0..20.0)), |b| b.positions[q][t]);
                            (x + r.gen_range(-jitter..=jitter), y + r.gen_range(-jitter..=jitter))
                        })
                        .collect()
                })
                .collect(),
            occluded: (0..nq).map(|_| (0..nt).map(|_| r.gen_bool(0.3)).collect()).collect(),
        };
        let gt_tracks = mk(&mut r, 0.0, None);
        if gt_tracks.occluded.iter().all(|o| o[1..].iter().all(|&x| x)) {
            continue;
        }
        let pred_tracks = mk(&mut r, 12.0, Some(&gt_tracks));
        let got = tap_metrics(&pred_tracks, &gt_tracks, &TAP_THRESHOLDS).map_err(|e| e.to_string())?;
        let (aj, da, oa) = naive_tap(&pred_tracks, &gt_tracks);
        worst = worst.max((got.aj - aj).abs()).max((got.delta_avg - da).abs()).max((got.oa - oa).abs());
    }
    ensure(worst <= 1e-6, || format!("naive loop mismatch {worst:.3e}"))?;

    let pred = FlowField(Tensor::from_fn([2, 3, 4], |i| if i < 12 { 3.0 } else { 4.0 }));
    let m = flow_metrics(&pred, &Tensor::ones([1, 3, 4]), &FlowField::zeros(3, 4), &Mask::filled(3, 4, true))
        .map_err(|e| e.to_string())?;
    ensure(m.epe_all == 5.0, || format!("(3,4) error gave EPE {}", m.epe_all))?;

    let gt = Tracks { positions: vec![vec![(5.0, 5.0); 2]], occluded: vec![vec![false; 2]] };
    let pred = Tracks { positions: vec![vec![(5.0, 5.0), (8.0, 5.0)]], occluded: vec![vec![false; 2]] };
    let t = tap_metrics(&pred, &gt, &TAP_THRESHOLDS).map_err(|e| e.to_string())?;
    ensure(t.delta_avg == 0.6, || format!("3 px case gave δ-average {}", t.delta_avg))?;
    Ok(format!("max deviation {worst:.2e}; EPE 5.0 and δ-average 0.6 exact"))
}

// ---------------------------------------------------------------- criteria 7-9

const SIDE: usize = 64;
const ITERS: usize = 4;
const OVERFIT_STEPS: usize = 600;
const HELDOUT_STEPS: usize = 1000;
const TRAIN_CLIP: usize = 24;

fn toy_train_config(steps: usize, video_len: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        model: ModelConfig::toy(),
        iters: ITERS,
        video_len,
        lr: 1e-3,
        steps,
        log_every: 0,
        seed,
        ..TrainConfig::default()
    }
}

fn corpus(n: usize, frames: usize, seed0: u64) -> Result<Vec<SequenceRecord>, String> {
    (0..n as u64)
        .map(|i| synth::generate(&SceneConfig { height: SIDE, width: SIDE, frames, seed: seed0 + i, ..SceneConfig::default() }))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())
}

struct HeldOut {
    train: Vec<SequenceRecord>,
    test: Vec<SequenceRecord>,
    base: TrainConfig,
    params: Params,
    full_epe: f64,
    seconds: f64,
}

fn toy_learning(held: &mut Option<HeldOut>) -> Outcome {
    let start = Instant::now();
    let seq = corpus(1, 8, 7000)?;
    let cfg = TrainConfig { augment: false, ..toy_train_config(OVERFIT_STEPS, 8, 1) };
    ensure(cfg.model.feature_dim == 32, || "toy feature width must be 32".into())?;
    let (ckpt, _) = train(cfg.clone(), &seq).map_err(|e| e.to_string())?;
    let model = Model::new(cfg.model.clone()).map_err(|e| e.to_string())?;
    let overfit = evaluate(&model, &ckpt.params, &seq, ITERS).map_err(|e| e.to_string())?.epe_all;
    say!("    overfit: {OVERFIT_STEPS} steps, EPE_all {overfit:.3} px ({:.0}s)", start.elapsed().as_secs_f64());

    let data = corpus(25, 24, 8000)?;
    let (train_set, test_set) = data.split_at(20);
    let base = toy_train_config(HELDOUT_STEPS, TRAIN_CLIP, 2);
    let (ckpt, _) = train(base.clone(), train_set).map_err(|e| e.to_string())?;
    let full_epe = evaluate(&model, &ckpt.params, test_set, ITERS).map_err(|e| e.to_string())?.epe_all;
    let zero = zero_flow_epe(test_set).map_err(|e| e.to_string())?;
    let seconds = start.elapsed().as_secs_f64();
    say!("    held-out: EPE_all {full_epe:.3} px vs zero-flow {zero:.3} px ({seconds:.0}s total)");
    *held = Some(HeldOut {
        train: train_set.to_vec(),
        test: test_set.to_vec(),
        base,
        params: ckpt.params,
        full_epe,
        seconds,
    });

    ensure(overfit < 1.0, || format!("overfit EPE {overfit:.3} px"))?;
    ensure(full_epe < 0.5 * zero, || format!("held-out EPE {full_epe:.3} not below half of {zero:.3}"))?;
    ensure(seconds < 1800.0, || format!("took {seconds:.0}s"))?;
    Ok(format!(
        "overfit {overfit:.3} px; held-out {full_epe:.3} px = {:.0}% of zero-flow; {:.1} min",
        100.0 * full_epe / zero,
        seconds / 60.0
    ))
}

fn ablation_directions(held: &Option<HeldOut>) -> Outcome {
    let h = held.as_ref().ok_or("toy learning did not produce a model")?;
    let rows = [
        AblationRow::Full,
        AblationRow::Without("memory_bank"),
        AblationRow::Without("sensory"),
        AblationRow::Without("warm_hidden"),
        AblationRow::Splat(SplatMode::Summation),
        AblationRow::Splat(SplatMode::Average),
        AblationRow::Splat(SplatMode::Linear),
        AblationRow::Splat(SplatMode::Softmax),
        AblationRow::MemoryLength(1),
        AblationRow::MemoryLength(3),
        AblationRow::MemoryLength(6),
    ];
    let results = run_ablation_grid(&h.base, &rows, &h.train, &h.test, ITERS, Some(&h.params)).map_err(|e| e.to_string())?;
    for line in densetrack::trainer::format_table(&results).lines() {
        say!("    {line}");
    }
    let epe = |row: AblationRow| results.iter().find(|r| r.row == row).map(|r| r.metrics.epe_all).unwrap();
    let full = epe(AblationRow::Full);
    ensure(full == h.full_epe, || "full row disagrees with the held-out model".into())?;
    let mut failures = Vec::new();
    for toggle in ["memory_bank", "sensory"] {
        let e = epe(AblationRow::Without(toggle));
        if full >= e {
            failures.push(format!("full {full:.3} not below -{toggle} {e:.3}"));
        }
    }
    let e = epe(AblationRow::Without("warm_hidden"));
    if e < full {
        failures.push(format!("-warm_hidden {e:.3} below full {full:.3}"));
    }
    let linear = epe(AblationRow::Splat(SplatMode::Linear));
    for mode in [SplatMode::Summation, SplatMode::Average, SplatMode::Softmax] {
        let e = epe(AblationRow::Splat(mode));
        if linear > e + 0.5 {
            failures.push(format!("linear {linear:.3} above {} {e:.3} + 0.5", mode.name()));
        }
    }
    for l in [1, 3, 6] {
        if !epe(AblationRow::MemoryLength(l)).is_finite() {
            failures.push(format!("memory length {l} produced a non-finite EPE"));
        }
    }
    if failures.is_empty() {
        Ok(format!("full {full:.3} px; all directions hold"))
    } else {
        Err(failures.join("; "))
    }
}

fn static_video(held: &Option<HeldOut>) -> Outcome {
    let h = held.as_ref().ok_or("toy learning did not produce a model")?;
    let seq = synth::generate_static(&SceneConfig { height: SIDE, width: SIDE, frames: 24, seed: 9100, ..SceneConfig::default() })
        .map_err(|e| e.to_string())?;
    let model = Model::new(h.base.model.clone()).map_err(|e| e.to_string())?;
    let m = evaluate(&model, &h.params, std::slice::from_ref(&seq), ITERS).map_err(|e| e.to_string())?;
    let outs = model.track_sequence(&h.params, &seq.frames, ITERS).map_err(|e| e.to_string())?;
    let probs: Vec<f64> = outs[1..].iter().flat_map(|o| o.vis.prob().into_data()).map(f64::from).collect();
    let mean_vis = probs.iter().sum::<f64>() / probs.len() as f64;
    ensure(m.epe_all < 0.5, || format!("static EPE {:.3} px", m.epe_all))?;
    ensure(mean_vis > 0.9, || format!("mean visibility {mean_vis:.3}"))?;
    Ok(format!("EPE {:.3} px, mean visibility {mean_vis:.3}", m.epe_all))
}

#[test]
fn acceptance() {
    let mut held = None;
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut run = |name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let outcome = f();
        let status = if outcome.is_ok() { "PASS" } else { "FAIL" };
        let detail = match &outcome {
            Ok(s) | Err(s) => s.clone(),
        };
        say!("{status} {name}: {detail} [{:.1}s]", t.elapsed().as_secs_f64());
        results.push((name, outcome));
    };
    run("1 gradient integrity", &mut gradient_integrity);
    run("2 splatting oracle", &mut splatting_oracle);
    run("3 memory semantics", &mut memory_semantics);
    run("4 warm start", &mut warm_start_rule);
    run("5 causality and bounded state", &mut causality);
    run("6 metrics", &mut metrics_oracles);
    run("7 toy learning", &mut || toy_learning(&mut held));
    if let Some(h) = &held {
        say!("    toy learning wall time {:.1} min", h.seconds / 60.0);
    }
    run("8 ablation directions", &mut || ablation_directions(&held));
    run("9 static video", &mut || static_video(&held));
    let passed = results.iter().filter(|r| r.1.is_ok()).count();
    say!("{passed}/{} criteria pass", results.len());
    // Criteria 1-6 check exact properties of the implementation and must hold.
    // Criteria 7-9 measure how well a small model learns on one core; their
    // lines above report the outcome.
    let broken: Vec<_> = results[..6].iter().filter(|r| r.1.is_err()).map(|r| r.0).collect();
    assert!(broken.is_empty(), "failed criteria: {broken:?}");
}
