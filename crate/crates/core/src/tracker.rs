//! Streaming orchestration: encode, read and fuse memory, decode with a
//! warm start, then splat the reference features into the bank.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::config::ModelConfig;
use crate::decoder::{upsample4x, DecodeInputs, Decoder, FlowField, MotionEncoder, UpdateBlock, VisibilityMap};
use crate::encoder::{Encoder, Frame};
use crate::error::{shape_err, Error, Result};
use crate::memory::{self, Fusion, MemoryBank, QueryProjector, SensoryMemory};
use crate::nn::{ParamVars, Params};
use crate::splatting::splat_var;
use crate::tensor::{Real, Tensor};

/// Logit used for "visible" where no estimate exists yet; sigmoid(5) ≈ 0.9933.
pub const INIT_VIS_LOGIT: f64 = 5.0;

/// Frames are padded to a multiple of this before encoding so that every
/// correlation pyramid level has integral size.
pub const PAD_MULTIPLE: usize = 8;

/// `prev_init + 2·(prev_final − prev_init)`: one-step linear extrapolation of
/// the flow initialization.
pub fn warm_start<T: Real>(prev_init: &Tensor<T>, prev_final: &Tensor<T>) -> Result<Tensor<T>> {
    let two = T::lit(2.0);
    prev_init.zip_map(prev_final, |i, f| i + two * (f - i))
}

/// Network architecture. Parameters live separately in [`Params`].
#[derive(Debug)]
pub struct Model {
    config: ModelConfig,
    feature: Encoder,
    context: Encoder,
    query: QueryProjector,
    fusion: Fusion,
    decoder: Decoder,
    sensory: SensoryMemory,
    encode_calls: AtomicUsize,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Model::new(self.config.clone()).expect("config was validated")
    }
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let sensory_in = if c.toggles.sensory { c.sensory_dim } else { 0 };
        let decoder = Decoder {
            motion: MotionEncoder::new(c.lookup_channels(), c.motion_dim),
            update: UpdateBlock::new(c.hidden_dim, c.context_dim + c.motion_dim + sensory_in, c.gru_kernel),
            levels: c.corr_levels,
            radius: c.corr_radius,
        };
        Ok(Model {
            feature: Encoder::new("fnet", c.encoder_widths, c.feature_dim, true),
            context: Encoder::new("cnet", c.encoder_widths, c.context_dim, false),
            query: QueryProjector::new(c.feature_dim, c.key_dim, c.toggles.query_projector),
            fusion: Fusion::new(c.feature_dim, c.feature_dim, c.fusion_kernel),
            decoder,
            sensory: SensoryMemory::new(c.sensory_dim, c.motion_dim, c.gru_kernel),
            encode_calls: AtomicUsize::new(0),
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Replaces the memory capacity; it carries no parameters.
    pub fn set_memory_len(&mut self, len: usize) -> Result<()> {
        if len == 0 {
            return Err(Error::Config("memory length must be positive".into()));
        }
        self.config.memory_len = len;
        Ok(())
    }

    /// Freshly initialized parameters for every enabled module.
    pub fn init_params<T: Real>(&self, rng: &mut impl Rng) -> Params<T> {
        let mut p = Params::new();
        self.feature.init(&mut p, rng);
        self.context.init(&mut p, rng);
        let t = &self.config.toggles;
        if t.memory_bank {
            self.query.init(&mut p, rng);
            self.fusion.init(&mut p, rng);
        }
        self.decoder.init(&mut p, rng);
        if t.sensory {
            self.sensory.init(&mut p, rng);
        }
        p
    }

    /// Number of feature-encoder evaluations so far.
    pub fn encode_calls(&self) -> usize {
        self.encode_calls.load(Ordering::Relaxed)
    }

    fn encode_features<T: Real>(&self, g: &Graph<T>, vars: &ParamVars, frame: Var) -> Result<Var> {
        self.encode_calls.fetch_add(1, Ordering::Relaxed);
        self.feature.forward(g, vars, frame)
    }

    /// Reference features `F1` and context `f_c` for the first frame.
    pub fn encode_reference<T: Real>(&self, g: &Graph<T>, vars: &ParamVars, frame: Var) -> Result<(Var, Var)> {
        let f1 = self.encode_features(g, vars, frame)?;
        let fc = g.relu(self.context.forward(g, vars, frame)?);
        Ok((f1, fc))
    }

    /// Starts a stream on a graph. `frame` must already be padded.
    pub fn init_graph<T: Real>(&self, g: &Graph<T>, vars: &ParamVars, frame: Var) -> Result<GraphState<T>> {
        let (f1, fc) = self.encode_reference(g, vars, frame)?;
        let mut state = GraphState::fresh(self, g, f1, fc);
        let t = &self.config.toggles;
        if t.memory_bank && t.seed_bank {
            let key = self.query.forward(g, vars, f1)?;
            let value = memory::grid_to_rows(g, f1)?;
            memory::write_var(g, &mut state.bank, key, value)?;
        }
        Ok(state)
    }

    /// One streaming step on a graph. `frame` must match the reference geometry.
    pub fn step_graph<T: Real>(
        &self,
        g: &Graph<T>,
        vars: &ParamVars,
        state: &mut GraphState<T>,
        frame: Var,
        iters: usize,
    ) -> Result<StepVars> {
        let fs = g.shape(frame);
        if fs[1..] != [state.h * 4, state.w * 4] {
            return shape_err(format!(
                "frame {}x{} does not match reference {}x{}",
                fs[1],
                fs[2],
                state.h * 4,
                state.w * 4
            ));
        }
        let cfg = &self.config;
        let tg = &cfg.toggles;
        let ft = self.encode_features(g, vars, frame)?;
        let mut key = None;
        let enhanced = if tg.memory_bank {
            let q = self.query.forward(g, vars, ft)?;
            key = Some(q);
            if state.bank.is_empty() {
                ft
            } else {
                let readout = memory::read(g, &state.bank, q, state.h, state.w)?;
                self.fusion.forward(g, vars, ft, readout)?
            }
        } else {
            ft
        };

        let init_flow = if tg.warm_flow {
            warm_start(&state.prev_init, &state.prev_final)?
        } else {
            state.prev_final.clone()
        };
        let init_vis = if tg.warm_vis {
            state.prev_vis.clone()
        } else {
            Tensor::full([1, state.h, state.w], T::lit(INIT_VIS_LOGIT))
        };
        let init_hidden = if tg.warm_hidden {
            state.hidden
        } else {
            g.constant(Tensor::zeros([cfg.hidden_dim, state.h, state.w]))
        };
        let inputs = DecodeInputs {
            enhanced,
            reference: state.f1,
            context: state.fc,
            sensory: tg.sensory.then_some(state.sensory),
            init_flow: g.constant(init_flow.clone()),
            init_vis_logits: g.constant(init_vis),
            init_hidden,
        };
        let out = self.decoder.decode(g, vars, &inputs, iters)?;

        if tg.sensory {
            if let Some(m) = out.motion {
                state.sensory = self.sensory.update(g, vars, state.sensory, m)?;
            }
        }
        if let Some(k) = key {
            let prob = g.sigmoid(out.vis_logits);
            let (value, _) = splat_var(g, state.f1, out.flow, prob, cfg.splat_mode, &cfg.splat)?;
            let value = memory::grid_to_rows(g, value)?;
            memory::write_var(g, &mut state.bank, k, value)?;
        }
        state.prev_init = init_flow;
        state.prev_final = (*g.value(out.flow)).clone();
        state.prev_vis = (*g.value(out.vis_logits)).clone();
        state.hidden = out.hidden;
        state.t += 1;
        Ok(StepVars {
            flow: out.flow,
            vis_logits: out.vis_logits,
            per_iter_flows: out.per_iter_flows,
            per_iter_vis: out.per_iter_vis,
        })
    }

    /// Encodes the first frame and returns the identity output.
    pub fn init<T: Real>(&self, params: &Params<T>, frame: &Frame<T>) -> Result<(TrackerState<T>, TrackOutput<T>)> {
        let g = Graph::no_grad();
        let vars = params.bind(&g, false);
        let padded = frame.padded_to_multiple(PAD_MULTIPLE);
        let x = g.constant(padded.into_tensor());
        let gs = self.init_graph(&g, &vars, x)?;
        let state = TrackerState::lower(&g, &gs, frame.height(), frame.width());
        let out = state.identity_output();
        Ok((state, out))
    }

    /// Tracks the reference pixels into `frame` with `iters` refinements.
    pub fn step<T: Real>(
        &self,
        params: &Params<T>,
        state: TrackerState<T>,
        frame: &Frame<T>,
        iters: usize,
    ) -> Result<(TrackerState<T>, TrackOutput<T>)> {
        if (frame.height(), frame.width()) != (state.height, state.width) {
            return shape_err(format!(
                "frame {}x{} does not match stream {}x{}",
                frame.height(),
                frame.width(),
                state.height,
                state.width
            ));
        }
        let g = Graph::no_grad();
        let vars = params.bind(&g, false);
        let mut gs = state.lift(&g, self.config.memory_len);
        let padded = frame.padded_to_multiple(PAD_MULTIPLE);
        let x = g.constant(padded.into_tensor());
        let sv = self.step_graph(&g, &vars, &mut gs, x, iters)?;
        let next = TrackerState::lower(&g, &gs, state.height, state.width);
        let flow_q = FlowField((*g.value(sv.flow)).clone());
        let vis_q = VisibilityMap::from_logits((*g.value(sv.vis_logits)).clone());
        let out = TrackOutput::from_quarter(flow_q, vis_q, state.height, state.width)?;
        Ok((next, out))
    }

    /// Runs a whole sequence causally: output `i` depends on frames `0..=i` only.
    pub fn track_sequence<T: Real>(&self, params: &Params<T>, frames: &[Frame<T>], iters: usize) -> Result<Vec<TrackOutput<T>>> {
        let Some((first, rest)) = frames.split_first() else {
            return Err(Error::Contract("cannot track an empty frame sequence".into()));
        };
        let (mut state, out) = self.init(params, first)?;
        let mut outputs = vec![out];
        for frame in rest {
            let (next, out) = self.step(params, state, frame, iters)?;
            state = next;
            outputs.push(out);
        }
        Ok(outputs)
    }
}

/// Stream state with graph handles, for use inside one graph.
pub struct GraphState<T: Real> {
    pub f1: Var,
    pub fc: Var,
    pub bank: MemoryBank<Var>,
    pub sensory: Var,
    pub hidden: Var,
    /// Initialization used for the previous frame (`f⁰`), quarter resolution.
    pub prev_init: Tensor<T>,
    /// Final estimate of the previous frame (`fᴺ`), quarter resolution.
    pub prev_final: Tensor<T>,
    pub prev_vis: Tensor<T>,
    /// 1-based index of the last processed frame.
    pub t: usize,
    /// Quarter-resolution height and width.
    pub h: usize,
    pub w: usize,
}

impl<T: Real> GraphState<T> {
    fn fresh(model: &Model, g: &Graph<T>, f1: Var, fc: Var) -> Self {
        let s = g.shape(f1);
        let (h, w) = (s[1], s[2]);
        let c = &model.config;
        GraphState {
            f1,
            fc,
            bank: MemoryBank::new(c.memory_len),
            sensory: g.constant(Tensor::zeros([c.sensory_dim, h, w])),
            hidden: g.constant(Tensor::zeros([c.hidden_dim, h, w])),
            prev_init: Tensor::zeros([2, h, w]),
            prev_final: Tensor::zeros([2, h, w]),
            prev_vis: Tensor::full([1, h, w], T::lit(INIT_VIS_LOGIT)),
            t: 1,
            h,
            w,
        }
    }

    /// Cuts every gradient path into earlier frames.
    pub fn detach(&mut self, g: &Graph<T>) -> Result<()> {
        self.f1 = g.detach(self.f1);
        self.fc = g.detach(self.fc);
        self.bank = self.bank.try_map(|&v| Ok(g.detach(v)))?;
        self.sensory = g.detach(self.sensory);
        self.hidden = g.detach(self.hidden);
        Ok(())
    }
}

/// Everything carried between frames of one stream, as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackerState<T: Real = f32> {
    pub f1: Tensor<T>,
    pub fc: Tensor<T>,
    pub bank: MemoryBank<Tensor<T>>,
    pub sensory: Tensor<T>,
    pub hidden: Tensor<T>,
    pub prev_init: Tensor<T>,
    pub prev_final: Tensor<T>,
    pub prev_vis: Tensor<T>,
    pub t: usize,
    /// Unpadded frame size.
    pub height: usize,
    pub width: usize,
}

impl<T: Real> TrackerState<T> {
    pub fn lower(g: &Graph<T>, s: &GraphState<T>, height: usize, width: usize) -> Self {
        let v = |x: Var| (*g.value(x)).clone();
        TrackerState {
            f1: v(s.f1),
            fc: v(s.fc),
            bank: s.bank.try_map(|&x| Ok(v(x))).expect("infallible"),
            sensory: v(s.sensory),
            hidden: v(s.hidden),
            prev_init: s.prev_init.clone(),
            prev_final: s.prev_final.clone(),
            prev_vis: s.prev_vis.clone(),
            t: s.t,
            height,
            width,
        }
    }

    /// Constants on `g`; the bank capacity is reset to `memory_len`.
    pub fn lift(&self, g: &Graph<T>, memory_len: usize) -> GraphState<T> {
        let c = |x: &Tensor<T>| g.constant(x.clone());
        let mut bank = self.bank.try_map(|x| Ok(c(x))).expect("infallible");
        bank.set_capacity(memory_len);
        GraphState {
            f1: c(&self.f1),
            fc: c(&self.fc),
            bank,
            sensory: c(&self.sensory),
            hidden: c(&self.hidden),
            prev_init: self.prev_init.clone(),
            prev_final: self.prev_final.clone(),
            prev_vis: self.prev_vis.clone(),
            t: self.t,
            h: self.f1.dim(1),
            w: self.f1.dim(2),
        }
    }

    /// Bytes held by the state's tensors.
    pub fn footprint(&self) -> usize {
        let n = self.f1.numel()
            + self.fc.numel()
            + self.sensory.numel()
            + self.hidden.numel()
            + self.prev_init.numel()
            + self.prev_final.numel()
            + self.prev_vis.numel();
        n * std::mem::size_of::<T>() + self.bank.footprint()
    }

    fn identity_output(&self) -> TrackOutput<T> {
        let (h, w) = (self.f1.dim(1), self.f1.dim(2));
        let flow_q = FlowField::zeros(h, w);
        let vis_q = VisibilityMap::from_logits(Tensor::full([1, h, w], T::lit(INIT_VIS_LOGIT)));
        TrackOutput::from_quarter(flow_q, vis_q, self.height, self.width).expect("padded geometry covers the frame")
    }
}

/// Per-frame result: full-resolution flow `1→t` and visibility, plus the
/// quarter-resolution fields the decoder produced (padded geometry).
#[derive(Clone, Debug, PartialEq)]
pub struct TrackOutput<T: Real = f32> {
    pub flow: FlowField<T>,
    pub vis: VisibilityMap<T>,
    pub flow_q: FlowField<T>,
    pub vis_q: VisibilityMap<T>,
}

impl<T: Real> TrackOutput<T> {
    pub fn from_quarter(flow_q: FlowField<T>, vis_q: VisibilityMap<T>, height: usize, width: usize) -> Result<Self> {
        let (flow, vis) = upsample4x(&flow_q, &vis_q);
        Ok(TrackOutput {
            flow: FlowField(flow.0.crop(height, width)?),
            vis: VisibilityMap::from_logits(vis.logits.crop(height, width)?),
            flow_q,
            vis_q,
        })
    }
}

/// Graph outputs of one step.
#[derive(Clone, Debug)]
pub struct StepVars {
    pub flow: Var,
    pub vis_logits: Var,
    pub per_iter_flows: Vec<Var>,
    pub per_iter_vis: Vec<Var>,
}
