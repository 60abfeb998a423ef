use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::splatting::{SplatConfig, SplatMode};

/// Switches for the module and warm-start ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggles {
    /// Memory reading, fusion and memory writes.
    pub memory_bank: bool,
    /// Sensory memory as GRU input and its recurrent update.
    pub sensory: bool,
    /// Linear query projection; identity when off.
    pub query_projector: bool,
    /// Carry the last GRU hidden state into the next frame.
    pub warm_hidden: bool,
    /// Extrapolate the flow initialization; reuse the last final flow when off.
    pub warm_flow: bool,
    /// Carry the last visibility logits into the next frame.
    pub warm_vis: bool,
    /// Seed the bank with the reference frame at t=1.
    pub seed_bank: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles {
            memory_bank: true,
            sensory: true,
            query_projector: true,
            warm_hidden: true,
            warm_flow: true,
            warm_vis: true,
            seed_bank: true,
        }
    }
}

impl Toggles {
    pub const ABLATABLE: [&'static str; 7] =
        ["memory_bank", "sensory", "query_projector", "warm_hidden", "warm_flow", "warm_vis", "seed_bank"];

    /// Turns off the named component.
    pub fn disable(&mut self, name: &str) -> Result<()> {
        let slot = match name {
            "memory_bank" => &mut self.memory_bank,
            "sensory" => &mut self.sensory,
            "query_projector" => &mut self.query_projector,
            "warm_hidden" => &mut self.warm_hidden,
            "warm_flow" => &mut self.warm_flow,
            "warm_vis" => &mut self.warm_vis,
            "seed_bank" => &mut self.seed_bank,
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation `{other}`; valid toggles: {}",
                    Self::ABLATABLE.join(", ")
                )))
            }
        };
        *slot = false;
        Ok(())
    }
}

/// Architecture and streaming hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Feature width `D` of the 1/4-resolution map.
    pub feature_dim: usize,
    /// Context feature width.
    pub context_dim: usize,
    /// Encoder widths at 1/2 and 1/4 resolution.
    pub encoder_widths: [usize; 2],
    /// Query/key width; forced to `feature_dim` without a projector.
    pub key_dim: usize,
    pub sensory_dim: usize,
    pub hidden_dim: usize,
    pub motion_dim: usize,
    pub corr_levels: usize,
    pub corr_radius: usize,
    pub fusion_kernel: usize,
    pub gru_kernel: usize,
    /// FIFO capacity `L` of the memory bank, in frames.
    pub memory_len: usize,
    pub splat_mode: SplatMode,
    pub splat: SplatConfig,
    pub toggles: Toggles,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 64,
            context_dim: 64,
            encoder_widths: [32, 48],
            key_dim: 64,
            sensory_dim: 64,
            hidden_dim: 96,
            motion_dim: 128,
            corr_levels: 4,
            corr_radius: 3,
            fusion_kernel: 3,
            gru_kernel: 3,
            memory_len: 3,
            splat_mode: SplatMode::Linear,
            splat: SplatConfig::default(),
            toggles: Toggles::default(),
        }
    }
}

impl ModelConfig {
    /// A small configuration that trains on a desktop CPU in minutes.
    pub fn toy() -> Self {
        ModelConfig {
            feature_dim: 32,
            context_dim: 16,
            encoder_widths: [16, 24],
            key_dim: 32,
            sensory_dim: 16,
            hidden_dim: 32,
            motion_dim: 32,
            ..ModelConfig::default()
        }
    }

    pub fn effective_key_dim(&self) -> usize {
        if self.toggles.query_projector {
            self.key_dim
        } else {
            self.feature_dim
        }
    }

    pub fn lookup_channels(&self) -> usize {
        self.corr_levels * (2 * self.corr_radius + 1).pow(2)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("feature_dim", self.feature_dim),
            ("context_dim", self.context_dim),
            ("key_dim", self.key_dim),
            ("sensory_dim", self.sensory_dim),
            ("hidden_dim", self.hidden_dim),
            ("motion_dim", self.motion_dim),
            ("corr_levels", self.corr_levels),
            ("memory_len", self.memory_len),
            ("encoder_widths[0]", self.encoder_widths[0]),
            ("encoder_widths[1]", self.encoder_widths[1]),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        for (name, k) in [("fusion_kernel", self.fusion_kernel), ("gru_kernel", self.gru_kernel)] {
            if k % 2 == 0 {
                return Err(Error::Config(format!("{name} must be odd, got {k}")));
            }
        }
        Ok(())
    }
}
