//! Synthetic ego-centric driving world.
//!
//! A straight road corridor is lined with buildings of varying height and
//! dotted with static obstacles; vehicles drive along it. The ego vehicle is
//! steered by a scripted lane keeper and sees an occluded, noisy crop of the
//! true voxel occupancy around it.

mod dataset;
mod format;
mod sim;

pub use dataset::{make_dataset, sha256_hex, Manifest, ManifestEntry, Split, MANIFEST_FILE};
pub use format::{decode_episode, encode_episode, read_episode, write_episode, EPISODE_MAGIC, EPISODE_VERSION};
pub use sim::{replay_episode, simulate_episode, Agent, World};

use crate::nn::MotionContext;

pub const FREE: u8 = 0;
pub const STATIC: u8 = 1;
pub const DYNAMIC: u8 = 2;
/// Marks an unobserved voxel in an observation grid.
pub const UNKNOWN: u8 = 255;
pub const NUM_CLASSES: usize = 3;
pub const AGENT_HEIGHT: usize = 2;

#[derive(Debug, thiserror::Error)]
pub enum WorldError {
    #[error("invalid world config: {0}")]
    Config(String),
    #[error("could not place {0} agents after bounded retries")]
    Placement(usize),
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported episode version {found} (expected {expected})")]
    Version { found: u16, expected: u16 },
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("corrupt episode: {0}")]
    Corrupt(String),
    #[error("replay needs {expected} actions, got {got}")]
    ReplayLength { expected: usize, got: usize },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldConfig {
    pub height: usize,
    pub width: usize,
    /// Height slabs folded into channels.
    pub z_slabs: usize,
    pub classes: usize,
    pub n_agents: usize,
    /// Inclusive ego speed range in cells per step.
    pub ego_speed: (usize, usize),
    /// Visibility radius in cells; 0 disables occlusion.
    pub occlusion_radius: f64,
    /// Per-voxel probability of a class flip in observations.
    pub noise: f64,
    /// Probability per step that an agent drifts one cell sideways.
    pub turn_prob: f64,
    pub t_obs: usize,
    pub l_future: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            z_slabs: 4,
            classes: NUM_CLASSES,
            n_agents: 6,
            ego_speed: (1, 2),
            occlusion_radius: 12.0,
            noise: 0.02,
            turn_prob: 0.2,
            t_obs: 4,
            l_future: 4,
            seed: 0,
        }
    }
}

impl WorldConfig {
    /// Small grid and short horizon for gradient and bound audits.
    pub fn micro() -> Self {
        Self { height: 8, width: 8, z_slabs: 2, n_agents: 1, occlusion_radius: 4.0, t_obs: 3, l_future: 2, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        let bad = |m: &str| Err(WorldError::Config(m.to_string()));
        if self.height < 8 || self.width < 8 {
            return bad("grid must be at least 8x8");
        }
        if self.t_obs < 1 {
            return bad("t_obs must be >= 1");
        }
        if self.z_slabs < AGENT_HEIGHT {
            return bad("z_slabs must cover the agent height");
        }
        if self.classes != NUM_CLASSES {
            return bad("classes must be 3 (free, static, dynamic)");
        }
        if !(0.0..0.5).contains(&self.noise) {
            return bad("noise must lie in [0, 0.5)");
        }
        if !(0.0..=1.0).contains(&self.turn_prob) {
            return bad("turn_prob must lie in [0, 1]");
        }
        if self.ego_speed.0 > self.ego_speed.1 || self.ego_speed.1 > 4 {
            return bad("ego_speed must be an increasing range within 0..=4");
        }
        if !(self.occlusion_radius >= 0.0) {
            return bad("occlusion_radius must be >= 0");
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.t_obs + self.l_future
    }

    /// Voxels per step.
    pub fn voxels(&self) -> usize {
        self.z_slabs * self.height * self.width
    }

    /// Actuator bounds `(velocity, steering)`.
    pub fn action_bounds(&self) -> [f64; 2] {
        [self.ego_speed.1 as f64, 1.0]
    }

    /// Stable text form of every field, used for fingerprints.
    pub fn canonical(&self) -> String {
        format!(
            "height={} width={} z_slabs={} classes={} n_agents={} ego_speed={}..{} occlusion_radius={} noise={} turn_prob={} t_obs={} l_future={} seed={}",
            self.height,
            self.width,
            self.z_slabs,
            self.classes,
            self.n_agents,
            self.ego_speed.0,
            self.ego_speed.1,
            self.occlusion_radius,
            self.noise,
            self.turn_prob,
            self.t_obs,
            self.l_future,
            self.seed
        )
    }
}

/// One simulated drive. Grids are stored per step as `Z x H x W` class
/// indices; row index grows in the driving direction.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub height: usize,
    pub width: usize,
    pub z_slabs: usize,
    pub classes: usize,
    pub t_obs: usize,
    pub l_future: usize,
    pub n_agents: usize,
    pub labels: Vec<u8>,
    pub obs: Vec<u8>,
    /// `(velocity, steering)` taken after each step.
    pub actions: Vec<[f32; 2]>,
    /// `(forward, lateral, dt)` ego motion per step.
    pub motion: Vec<[f32; 3]>,
}

impl Episode {
    pub fn steps(&self) -> usize {
        self.actions.len()
    }

    pub fn voxels(&self) -> usize {
        self.z_slabs * self.height * self.width
    }

    pub fn label(&self, t: usize) -> &[u8] {
        let n = self.voxels();
        &self.labels[t * n..(t + 1) * n]
    }

    pub fn observation(&self, t: usize) -> &[u8] {
        let n = self.voxels();
        &self.obs[t * n..(t + 1) * n]
    }

    pub fn action(&self, t: usize) -> [f64; 2] {
        self.actions[t].map(f64::from)
    }

    pub fn motion_context(&self, t: usize) -> MotionContext {
        let m = self.motion[t];
        MotionContext::new([m[0] as f64, m[1] as f64], m[2] as f64)
    }

    /// Observation at step `t` as a one-hot `(Z*C) x H x W` tensor with
    /// channel `z*C + class`; unknown voxels are all-zero.
    pub fn observation_onehot(&self, t: usize) -> Vec<f64> {
        onehot(self.observation(t), self.classes, self.height * self.width)
    }

    /// Copy holding only the first `steps` steps.
    pub fn truncated(&self, steps: usize) -> Episode {
        let steps = steps.min(self.steps());
        let n = self.voxels();
        Episode {
            labels: self.labels[..steps * n].to_vec(),
            obs: self.obs[..steps * n].to_vec(),
            actions: self.actions[..steps].to_vec(),
            motion: self.motion[..steps].to_vec(),
            ..self.clone()
        }
    }
}

/// One-hot encodes `Z x HW` class indices into `(Z*C) x HW`.
pub fn onehot(grid: &[u8], classes: usize, plane: usize) -> Vec<f64> {
    let z = grid.len() / plane;
    let mut out = vec![0.0; z * classes * plane];
    for (i, &c) in grid.iter().enumerate() {
        if (c as usize) < classes {
            let (zi, p) = (i / plane, i % plane);
            out[(zi * classes + c as usize) * plane + p] = 1.0;
        }
    }
    out
}

#[cfg(test)]
mod tests;
