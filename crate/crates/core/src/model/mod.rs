//! The memory state-space world model and its recurrent baseline.

mod bank;
mod mssm;
mod prompt;

pub use bank::MemoryBank;
pub use mssm::{
    ForwardOptions, FutureMode, Gaussian, Mssm, RolloutStart, SequenceOutput, StepOutput,
};
pub use prompt::{TaskPrompt, PROMPTS};

use crate::grad::GradError;
use crate::nn::NnError;
use crate::world::{WorldConfig, NUM_CLASSES};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("{what}: expected {expected:?}, got {got:?}")]
    Dims { what: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("non-finite {what} at step {step}")]
    NonFinite { step: usize, what: &'static str },
    #[error("unknown task prompt `{0}`")]
    UnknownPrompt(String),
    #[error("episode has {got} steps, need at least {need}")]
    EpisodeTooShort { need: usize, got: usize },
}

impl From<GradError> for ModelError {
    fn from(e: GradError) -> Self {
        ModelError::Nn(NnError::Grad(e))
    }
}

/// Component switches. All on is the full memory state-space model; all off
/// is the plain recurrent state-space baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Flags {
    /// Static scene propagation of one observed frame to the decoder.
    pub ssp: bool,
    /// Dynamic memory bank with cross-attention refinement.
    pub dmb: bool,
    /// Motion-aware layer normalization before the transition.
    pub mln: bool,
    /// Task-prompt modulation of the decoder.
    pub prompt: bool,
}

impl Flags {
    pub const FULL: Flags = Flags { ssp: true, dmb: true, mln: true, prompt: true };
    pub const RSSM: Flags = Flags { ssp: false, dmb: false, mln: false, prompt: false };

    pub fn is_rssm(&self) -> bool {
        *self == Self::RSSM
    }

    pub fn label(&self) -> String {
        if self.is_rssm() {
            return "rssm".into();
        }
        let mut parts = vec![];
        for (on, name) in [(self.ssp, "ssp"), (self.dmb, "dmb"), (self.mln, "mln"), (self.prompt, "prompt")] {
            if on {
                parts.push(name);
            }
        }
        parts.join("+")
    }
}

/// How the propagated static feature joins the expanded latent grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Combine {
    Concat,
    Add,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub z_slabs: usize,
    pub classes: usize,
    pub t_obs: usize,
    pub l_future: usize,
    pub d_h: usize,
    pub d_s: usize,
    pub d_x: usize,
    /// Encoder feature channels.
    pub c_b: usize,
    /// Channels of the expanded latent grid.
    pub c_m: usize,
    /// Decoder channels.
    pub c_dec: usize,
    /// Width of the hidden layer in the Gaussian and policy heads.
    pub hidden: usize,
    /// Memory bank capacity.
    pub memory: usize,
    pub prompt_dim: usize,
    pub sigma_floor: f64,
    pub action_bounds: [f64; 2],
    pub flags: Flags,
    pub combine: Combine,
}

impl ModelConfig {
    pub fn for_world(w: &WorldConfig) -> Self {
        Self {
            height: w.height,
            width: w.width,
            z_slabs: w.z_slabs,
            classes: w.classes,
            t_obs: w.t_obs,
            l_future: w.l_future,
            d_h: 32,
            d_s: 16,
            d_x: 64,
            c_b: 16,
            c_m: 8,
            c_dec: 16,
            hidden: 64,
            memory: 8,
            prompt_dim: 8,
            sigma_floor: 1e-3,
            action_bounds: w.action_bounds(),
            flags: Flags::FULL,
            combine: Combine::Concat,
        }
    }

    /// Tiny dimensions for gradient and bound audits.
    pub fn micro() -> Self {
        Self {
            height: 8,
            width: 8,
            z_slabs: 2,
            classes: NUM_CLASSES,
            t_obs: 3,
            l_future: 2,
            d_h: 4,
            d_s: 3,
            d_x: 4,
            c_b: 2,
            c_m: 2,
            c_dec: 3,
            hidden: 5,
            memory: 2,
            prompt_dim: 2,
            sigma_floor: 1e-3,
            action_bounds: [2.0, 1.0],
            flags: Flags::FULL,
            combine: Combine::Concat,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            self.d_h, self.d_s, self.d_x, self.c_b, self.c_m, self.c_dec, self.hidden, self.memory, self.prompt_dim,
            self.z_slabs, self.t_obs,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(ModelError::Config("all dimensions must be >= 1".into()));
        }
        if self.height % 4 != 0 || self.width % 4 != 0 || self.height < 8 || self.width < 8 {
            return Err(ModelError::Config("grid sides must be multiples of 4 and >= 8".into()));
        }
        if self.classes != NUM_CLASSES {
            return Err(ModelError::Config("three occupancy classes expected".into()));
        }
        if !(self.sigma_floor > 0.0) {
            return Err(ModelError::Config("sigma_floor must be > 0".into()));
        }
        if self.combine == Combine::Add && self.c_m != self.c_b {
            return Err(ModelError::Config("additive combine needs c_m == c_b".into()));
        }
        Ok(())
    }

    /// Input and output channels of an occupancy grid.
    pub fn grid_channels(&self) -> usize {
        self.z_slabs * self.classes
    }

    /// Spatial size of encoded features.
    pub fn feature_hw(&self) -> (usize, usize) {
        (self.height / 4, self.width / 4)
    }

    /// Every field that changes parameter shapes or the computation.
    pub fn canonical(&self) -> String {
        format!(
            "grid={}x{}x{}x{} t={} l={} d_h={} d_s={} d_x={} c_b={} c_m={} c_dec={} hidden={} memory={} prompt_dim={} sigma_floor={} bounds={:?} flags={} combine={:?}",
            self.z_slabs, self.classes, self.height, self.width, self.t_obs, self.l_future, self.d_h, self.d_s,
            self.d_x, self.c_b, self.c_m, self.c_dec, self.hidden, self.memory, self.prompt_dim, self.sigma_floor,
            self.action_bounds, self.flags.label(), self.combine
        )
    }
}
