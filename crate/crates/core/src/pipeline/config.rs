use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use super::PipelineError;
use crate::model::{Combine, Flags, ModelConfig};
use crate::objective::LossWeights;
use crate::world::{sha256_hex, WorldConfig};

/// Everything a run depends on. Text form is one `key = value` per line.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub d_h: usize,
    pub d_s: usize,
    pub d_x: usize,
    pub c_b: usize,
    pub c_m: usize,
    pub c_dec: usize,
    pub hidden: usize,
    pub memory: usize,
    pub prompt_dim: usize,
    pub sigma_floor: f64,
    pub combine: Combine,
    pub flags: Flags,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient norm clip; 0 disables it.
    pub grad_clip: f64,
    pub steps: usize,
    pub batch: usize,
    pub kl_weight: f64,
    pub seed: u64,
    /// Fraction of the training split used for pretraining.
    pub data_fraction: f64,
    pub finetune_steps: usize,
    pub finetune_lr: f64,
    pub finetune_batch: usize,
    pub freeze_encoder: bool,
    /// Weight of positive cells in the fine-tuning loss; 0 picks
    /// `sqrt(negatives / positives)` of the training targets.
    pub pos_weight: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let world = WorldConfig::default();
        let m = ModelConfig::for_world(&world);
        Self {
            world,
            d_h: m.d_h,
            d_s: m.d_s,
            d_x: m.d_x,
            c_b: m.c_b,
            c_m: m.c_m,
            c_dec: m.c_dec,
            hidden: m.hidden,
            memory: m.memory,
            prompt_dim: m.prompt_dim,
            sigma_floor: m.sigma_floor,
            combine: m.combine,
            flags: m.flags,
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 0.0,
            steps: 500,
            batch: 4,
            kl_weight: 1.0,
            seed: 0,
            data_fraction: 1.0,
            finetune_steps: 200,
            finetune_lr: 2e-3,
            finetune_batch: 4,
            freeze_encoder: false,
            pos_weight: 0.0,
        }
    }
}

/// `(key, description)` of every accepted config key.
pub const KEYS: &[(&str, &str)] = &[
    ("height", "grid rows"),
    ("width", "grid columns"),
    ("z_slabs", "vertical slabs"),
    ("n_agents", "other vehicles"),
    ("ego_speed_min", "slowest ego cruise speed, cells per step"),
    ("ego_speed_max", "fastest ego cruise speed, cells per step"),
    ("occlusion_radius", "sensing radius in cells, 0 disables occlusion"),
    ("noise", "observation label flip probability"),
    ("turn_prob", "agent lateral drift probability"),
    ("t_obs", "observed steps T"),
    ("l_future", "imagined steps L"),
    ("world_seed", "world config seed"),
    ("d_h", "deterministic history width"),
    ("d_s", "stochastic state width"),
    ("d_x", "pooled observation feature width"),
    ("c_b", "BEV feature channels"),
    ("c_m", "expanded latent channels"),
    ("c_dec", "decoder channels"),
    ("hidden", "MLP hidden width"),
    ("memory", "memory bank capacity M"),
    ("prompt_dim", "prompt embedding width"),
    ("sigma_floor", "lower bound on latent standard deviations"),
    ("combine", "concat or add"),
    ("ssp", "static scene propagation"),
    ("dmb", "dynamic memory bank"),
    ("mln", "motion-aware layer normalization"),
    ("prompt", "task prompt conditioning"),
    ("lr", "pretraining learning rate"),
    ("beta1", "first moment decay"),
    ("beta2", "second moment decay"),
    ("adam_eps", "optimizer epsilon"),
    ("grad_clip", "global gradient norm clip, 0 disables it"),
    ("steps", "pretraining steps"),
    ("batch", "episodes per step"),
    ("kl_weight", "weight of the latent KL terms"),
    ("seed", "run seed"),
    ("data_fraction", "fraction of training episodes used"),
    ("finetune_steps", "fine-tuning steps"),
    ("finetune_lr", "fine-tuning learning rate"),
    ("finetune_batch", "episodes per fine-tuning step"),
    ("freeze_encoder", "keep encoder weights fixed while fine-tuning"),
    ("pos_weight", "positive-cell weight of the fine-tuning loss, 0 picks sqrt(negatives/positives)"),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, PipelineError> {
    value.parse().map_err(|_| PipelineError::BadValue { key: key.to_string(), value: value.to_string() })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, PipelineError> {
    match value {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(PipelineError::BadValue { key: key.to_string(), value: value.to_string() }),
    }
}

impl RunConfig {
    /// Short configuration for tests and quick runs.
    pub fn micro() -> Self {
        let world = WorldConfig::micro();
        let m = ModelConfig::micro();
        Self {
            world,
            d_h: m.d_h,
            d_s: m.d_s,
            d_x: m.d_x,
            c_b: m.c_b,
            c_m: m.c_m,
            c_dec: m.c_dec,
            hidden: m.hidden,
            memory: m.memory,
            prompt_dim: m.prompt_dim,
            steps: 10,
            batch: 2,
            lr: 1e-2,
            finetune_steps: 5,
            finetune_batch: 2,
            ..Self::default()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), PipelineError> {
        let v = value.trim();
        let w = &mut self.world;
        match key.trim() {
            "height" => w.height = parse(key, v)?,
            "width" => w.width = parse(key, v)?,
            "z_slabs" => w.z_slabs = parse(key, v)?,
            "n_agents" => w.n_agents = parse(key, v)?,
            "ego_speed_min" => w.ego_speed.0 = parse(key, v)?,
            "ego_speed_max" => w.ego_speed.1 = parse(key, v)?,
            "occlusion_radius" => w.occlusion_radius = parse(key, v)?,
            "noise" => w.noise = parse(key, v)?,
            "turn_prob" => w.turn_prob = parse(key, v)?,
            "t_obs" => w.t_obs = parse(key, v)?,
            "l_future" => w.l_future = parse(key, v)?,
            "world_seed" => w.seed = parse(key, v)?,
            "d_h" => self.d_h = parse(key, v)?,
            "d_s" => self.d_s = parse(key, v)?,
            "d_x" => self.d_x = parse(key, v)?,
            "c_b" => self.c_b = parse(key, v)?,
            "c_m" => self.c_m = parse(key, v)?,
            "c_dec" => self.c_dec = parse(key, v)?,
            "hidden" => self.hidden = parse(key, v)?,
            "memory" => self.memory = parse(key, v)?,
            "prompt_dim" => self.prompt_dim = parse(key, v)?,
            "sigma_floor" => self.sigma_floor = parse(key, v)?,
            "combine" => {
                self.combine = match v {
                    "concat" => Combine::Concat,
                    "add" => Combine::Add,
                    _ => return Err(PipelineError::BadValue { key: key.into(), value: v.into() }),
                }
            }
            "ssp" => self.flags.ssp = parse_bool(key, v)?,
            "dmb" => self.flags.dmb = parse_bool(key, v)?,
            "mln" => self.flags.mln = parse_bool(key, v)?,
            "prompt" => self.flags.prompt = parse_bool(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "grad_clip" => self.grad_clip = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "kl_weight" => self.kl_weight = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "data_fraction" => self.data_fraction = parse(key, v)?,
            "finetune_steps" => self.finetune_steps = parse(key, v)?,
            "finetune_lr" => self.finetune_lr = parse(key, v)?,
            "finetune_batch" => self.finetune_batch = parse(key, v)?,
            "freeze_encoder" => self.freeze_encoder = parse_bool(key, v)?,
            "pos_weight" => self.pos_weight = parse(key, v)?,
            other => return Err(PipelineError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), PipelineError> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| PipelineError::Config(format!("override `{assignment}` is not key=value")))?;
        self.set(k, v)
    }

    /// Parses `key = value` lines on top of the defaults. `#` starts a comment.
    pub fn parse_text(text: &str) -> Result<Self, PipelineError> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| PipelineError::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        Self::parse_text(&std::fs::read_to_string(path)?)
    }

    /// Every key in [`KEYS`] order; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let w = &self.world;
        let f = &self.flags;
        let combine = match self.combine {
            Combine::Concat => "concat",
            Combine::Add => "add",
        };
        let values: Vec<String> = vec![
            w.height.to_string(),
            w.width.to_string(),
            w.z_slabs.to_string(),
            w.n_agents.to_string(),
            w.ego_speed.0.to_string(),
            w.ego_speed.1.to_string(),
            w.occlusion_radius.to_string(),
            w.noise.to_string(),
            w.turn_prob.to_string(),
            w.t_obs.to_string(),
            w.l_future.to_string(),
            w.seed.to_string(),
            self.d_h.to_string(),
            self.d_s.to_string(),
            self.d_x.to_string(),
            self.c_b.to_string(),
            self.c_m.to_string(),
            self.c_dec.to_string(),
            self.hidden.to_string(),
            self.memory.to_string(),
            self.prompt_dim.to_string(),
            self.sigma_floor.to_string(),
            combine.to_string(),
            f.ssp.to_string(),
            f.dmb.to_string(),
            f.mln.to_string(),
            f.prompt.to_string(),
            self.lr.to_string(),
            self.beta1.to_string(),
            self.beta2.to_string(),
            self.adam_eps.to_string(),
            self.grad_clip.to_string(),
            self.steps.to_string(),
            self.batch.to_string(),
            self.kl_weight.to_string(),
            self.seed.to_string(),
            self.data_fraction.to_string(),
            self.finetune_steps.to_string(),
            self.finetune_lr.to_string(),
            self.finetune_batch.to_string(),
            self.freeze_encoder.to_string(),
            self.pos_weight.to_string(),
        ];
        let mut out = String::new();
        for ((k, _), v) in KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.world.validate()?;
        self.model_config().validate()?;
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if !(self.lr > 0.0) || !(self.finetune_lr > 0.0) {
            return bad("learning rates must be > 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be > 0");
        }
        if self.batch == 0 || self.finetune_batch == 0 {
            return bad("batch sizes must be >= 1");
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return bad("data_fraction must lie in (0, 1]");
        }
        if !(self.kl_weight >= 0.0) || !(self.grad_clip >= 0.0) || !(self.pos_weight >= 0.0) {
            return bad("kl_weight, grad_clip and pos_weight must be >= 0");
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_h: self.d_h,
            d_s: self.d_s,
            d_x: self.d_x,
            c_b: self.c_b,
            c_m: self.c_m,
            c_dec: self.c_dec,
            hidden: self.hidden,
            memory: self.memory,
            prompt_dim: self.prompt_dim,
            sigma_floor: self.sigma_floor,
            combine: self.combine,
            flags: self.flags,
            ..ModelConfig::for_world(&self.world)
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { kl: self.kl_weight, ..LossWeights::default() }
    }

    /// Digest of the model shape; checkpoints record it.
    pub fn fingerprint(&self) -> String {
        sha256_hex(self.model_config().canonical().as_bytes())[..16].to_string()
    }

    /// Deterministic identifier of the whole run.
    pub fn run_id(&self, kind: &str) -> String {
        format!("{kind}-{}", &sha256_hex(format!("{kind}\n{}", self.to_text()).as_bytes())[..12])
    }
}
