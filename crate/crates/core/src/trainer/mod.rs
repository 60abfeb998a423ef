//! Supervised training on synthetic sequences with truncated
//! backpropagation through time, plus evaluation and the ablation grid.

mod ablation;
mod augment;
mod checkpoint;
mod loss;
mod optim;

pub use ablation::{format_table, run_ablation_grid, AblationResult, AblationRow};
pub use augment::Augmentation;
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use loss::{frame_loss, LossConfig, QuarterTarget};
pub use optim::{clip_grad_norm, grad_norm, Adam, OneCycle};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::metrics::{FlowAccumulator, FlowMetrics};
use crate::nn::Params;
use crate::synth::SequenceRecord;
use crate::tracker::{GraphState, Model, TrackerState, PAD_MULTIPLE};

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// Refinement iterations during training.
    pub iters: usize,
    /// Sequences are cut to this many frames.
    pub video_len: usize,
    /// Peak learning rate of the one-cycle schedule.
    pub lr: f64,
    pub pct_start: f64,
    pub steps: usize,
    /// Sequences per optimizer step.
    pub batch_size: usize,
    pub loss: LossConfig,
    pub clip: f64,
    /// Frames per truncated-backpropagation window.
    pub bptt_window: usize,
    pub log_every: usize,
    pub seed: u64,
    /// Draw a random flip, transpose and channel order per sequence and step.
    #[serde(default)]
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            iters: 12,
            video_len: 24,
            lr: 4e-4,
            pct_start: 0.05,
            steps: 1000,
            batch_size: 1,
            loss: LossConfig::default(),
            clip: 1.0,
            bptt_window: 4,
            log_every: 10,
            seed: 0,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.loss.gamma > 0.0 && self.loss.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if self.video_len < 2 {
            return bad("training needs at least two frames per sequence");
        }
        if self.bptt_window == 0 || self.batch_size == 0 {
            return bad("bptt window and batch size must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be finite and non-negative");
        }
        Ok(())
    }
}

/// One line of the loss log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogEntry {
    pub step: usize,
    pub loss: f64,
    /// End-point error of the final estimates in full-resolution pixels.
    pub epe: f64,
}

impl LogEntry {
    pub fn csv(&self) -> String {
        format!("{},{},{}", self.step, self.loss, self.epe)
    }
}

/// Loss and gradients of one batch.
#[derive(Clone, Debug)]
pub struct BatchGrads {
    pub loss: f64,
    pub epe: f64,
    pub grads: Params,
}

/// Training state: parameters, optimizer and step counter.
#[derive(Debug)]
pub struct Trainer {
    config: TrainConfig,
    model: Model,
    params: Params,
    adam: Adam,
    step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model.clone())?;
        let params = model.init_params(&mut ChaCha8Rng::seed_from_u64(config.seed));
        let adam = Adam::new(&params);
        Ok(Trainer { config, model, params, adam, step: 0 })
    }

    /// Continues from a checkpoint; its model configuration wins.
    pub fn resume(mut config: TrainConfig, ckpt: Checkpoint) -> Result<Self> {
        config.model = ckpt.config;
        config.validate()?;
        let model = Model::new(config.model.clone())?;
        let adam = ckpt.adam.unwrap_or_else(|| Adam::new(&ckpt.params));
        Ok(Trainer { config, model, params: ckpt.params, adam, step: ckpt.step as usize })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.model.clone(),
            params: self.params.clone(),
            step: self.step as u64,
            adam: Some(self.adam.clone()),
        }
    }

    /// Sequence indices used at `step`: a fresh seeded permutation per epoch.
    pub fn batch_indices(&self, step: usize, corpus_len: usize) -> Vec<usize> {
        let bs = self.config.batch_size;
        (0..bs)
            .map(|j| {
                let k = step * bs + j;
                let (epoch, pos) = (k / corpus_len, k % corpus_len);
                let mut perm: Vec<usize> = (0..corpus_len).collect();
                perm.shuffle(&mut ChaCha8Rng::seed_from_u64(self.config.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9)));
                perm[pos]
            })
            .collect()
    }

    /// The augmentation drawn for batch slot `slot` at `step`.
    pub fn augmentation(&self, step: usize, slot: usize) -> Augmentation {
        let key = (step as u64).wrapping_mul(0xD1B5_4A32_D192_ED03) ^ (slot as u64).wrapping_mul(0x8CB9_2BA7_2F3D_8DD7);
        Augmentation::sample(&mut ChaCha8Rng::seed_from_u64(self.config.seed ^ key ^ 0xA076_1D64_78BD_642F))
    }

    /// Loss and accumulated gradients over `batch`, averaged per sequence.
    pub fn compute_gradients(&self, batch: &[&SequenceRecord]) -> Result<BatchGrads> {
        let mut grads = Params::new();
        let (mut loss, mut epe) = (0.0, 0.0);
        for seq in batch {
            let (l, e) = self.sequence_gradients(seq, &mut grads, 1.0 / batch.len() as f64)?;
            loss += l / batch.len() as f64;
            epe += e / batch.len() as f64;
        }
        Ok(BatchGrads { loss, epe, grads })
    }

    fn sequence_gradients(&self, seq: &SequenceRecord, grads: &mut Params, weight: f64) -> Result<(f64, f64)> {
        let seq = seq.prefix(self.config.video_len);
        let (h, w) = (seq.frames[0].height(), seq.frames[0].width());
        if seq.len() < 2 || h % PAD_MULTIPLE != 0 || w % PAD_MULTIPLE != 0 {
            return Err(Error::Config(format!(
                "training sequences need ≥2 frames and sides divisible by {PAD_MULTIPLE}, got {} frames of {w}x{h}",
                seq.len()
            )));
        }
        let targets = (1..seq.len())
            .map(|t| QuarterTarget::from_full(&seq.gt_flow[t], &seq.gt_vis[t]))
            .collect::<Result<Vec<_>>>()?;
        let scale = weight / (seq.len() - 1) as f64;
        let mut state: Option<TrackerState> = None;
        let (mut total, mut epe) = (0.0, 0.0);
        let mut t = 1;
        while t < seq.len() {
            let end = (t + self.config.bptt_window).min(seq.len());
            let g = Graph::new();
            let vars = self.params.bind(&g, true);
            let f0 = g.constant(seq.frames[0].tensor().clone());
            let mut gs: GraphState<f32> = match &state {
                None => self.model.init_graph(&g, &vars, f0)?,
                Some(s) => {
                    let mut gs = s.lift(&g, self.config.model.memory_len);
                    let (f1, fc) = self.model.encode_reference(&g, &vars, f0)?;
                    gs.f1 = f1;
                    gs.fc = fc;
                    gs
                }
            };
            let mut window = None;
            for (tt, target) in targets.iter().enumerate().take(end - 1).skip(t - 1) {
                let x = g.constant(seq.frames[tt + 1].tensor().clone());
                let sv = self.model.step_graph(&g, &vars, &mut gs, x, self.config.iters)?;
                let l = frame_loss(&g, &sv.per_iter_flows, sv.vis_logits, target, &self.config.loss)?;
                let l = g.scale(l, scale);
                window = Some(match window {
                    None => l,
                    Some(acc) => g.add(acc, l)?,
                });
                let pred = g.value(sv.flow);
                let n = pred.numel() / 2;
                let d = (pred.data(), target.flow.data());
                let e: f64 = (0..n)
                    .map(|i| ((d.0[i] - d.1[i]) as f64).hypot((d.0[n + i] - d.1[n + i]) as f64))
                    .sum::<f64>()
                    / n as f64;
                epe += 4.0 * e * scale;
            }
            let window = window.expect("non-empty window");
            let lv = g.value(window).item() as f64;
            if !lv.is_finite() {
                return Err(Error::Diverged { step: self.step, msg: format!("loss became {lv}") });
            }
            total += lv;
            g.backward(window)?;
            for (name, &v) in vars.iter() {
                if let Some(gr) = g.grad(v) {
                    match grads.get_mut(name) {
                        Some(acc) => acc.data_mut().iter_mut().zip(gr.data()).for_each(|(a, &b)| *a += b),
                        None => grads.insert(name.clone(), gr),
                    }
                }
            }
            state = Some(TrackerState::lower(&g, &gs, h, w));
            t = end;
        }
        Ok((total / weight, epe / weight))
    }

    /// One optimizer step on the batch scheduled for the current step. On a
    /// non-finite loss or gradient the parameters are left untouched and
    /// [`Error::Diverged`] is returned.
    pub fn train_step(&mut self, corpus: &[SequenceRecord]) -> Result<LogEntry> {
        if corpus.is_empty() {
            return Err(Error::Config("training corpus is empty".into()));
        }
        let mut batch: Vec<SequenceRecord> = self
            .batch_indices(self.step, corpus.len())
            .into_iter()
            .map(|i| corpus[i].prefix(self.config.video_len))
            .collect();
        if self.config.augment {
            for (j, seq) in batch.iter_mut().enumerate() {
                *seq = self.augmentation(self.step, j).apply(seq);
            }
        }
        let refs: Vec<&SequenceRecord> = batch.iter().collect();
        let mut bg = self.compute_gradients(&refs)?;
        let norm = clip_grad_norm(&mut bg.grads, self.config.clip);
        if !norm.is_finite() {
            return Err(Error::Diverged { step: self.step, msg: format!("gradient norm became {norm}") });
        }
        let sched = OneCycle { max_lr: self.config.lr, total_steps: self.config.steps, pct_start: self.config.pct_start };
        self.adam.step(&mut self.params, &bg.grads, sched.lr(self.step))?;
        let entry = LogEntry { step: self.step, loss: bg.loss, epe: bg.epe };
        self.step += 1;
        Ok(entry)
    }

    /// Trains until `config.steps`, calling `log` every `log_every` steps and
    /// on the last one.
    pub fn run(&mut self, corpus: &[SequenceRecord], mut log: impl FnMut(&LogEntry)) -> Result<Vec<LogEntry>> {
        let mut curve = Vec::new();
        while self.step < self.config.steps {
            let e = self.train_step(corpus)?;
            let every = self.config.log_every.max(1);
            if e.step % every == 0 || self.step == self.config.steps {
                log(&e);
                curve.push(e);
            }
        }
        Ok(curve)
    }
}

/// Trains from scratch and returns the final checkpoint and logged curve.
pub fn train(config: TrainConfig, corpus: &[SequenceRecord]) -> Result<(Checkpoint, Vec<LogEntry>)> {
    let mut trainer = Trainer::new(config)?;
    let curve = trainer.run(corpus, |_| {})?;
    Ok((trainer.checkpoint(), curve))
}

/// Tracks every sequence and scores all frames after the first at full
/// resolution, pixel-weighted.
pub fn evaluate(model: &Model, params: &Params, seqs: &[SequenceRecord], iters: usize) -> Result<FlowMetrics> {
    let mut acc = FlowAccumulator::default();
    for seq in seqs {
        let outs = model.track_sequence(params, &seq.frames, iters)?;
        for (t, out) in outs.iter().enumerate().skip(1) {
            acc.add(&out.flow, &out.vis.prob(), &seq.gt_flow[t], &seq.gt_vis[t])?;
        }
    }
    acc.finish()
}

/// EPE of predicting zero motion, with the same frame weighting as [`evaluate`].
pub fn zero_flow_epe(seqs: &[SequenceRecord]) -> Result<f64> {
    let mut acc = FlowAccumulator::default();
    for seq in seqs {
        for t in 1..seq.len() {
            let (h, w) = (seq.gt_flow[t].height(), seq.gt_flow[t].width());
            let zero = crate::decoder::FlowField::zeros(h, w);
            acc.add(&zero, &crate::tensor::Tensor::ones([1, h, w]), &seq.gt_flow[t], &seq.gt_vis[t])?;
        }
    }
    Ok(acc.finish()?.epe_all)
}
