use std::fmt;
use std::path::Path;
use std::str::FromStr;

use super::train::{accumulate, batch_indices, check_episodes, forward_rng, scale};
use super::{Adam, AdamConfig, MetricsLog, PipelineError, RunConfig};
use crate::grad::{RngState, Value};
use crate::model::{ForwardOptions, Mssm, TaskPrompt};
use crate::nn::{self, Grads, Tape};
use crate::world::{Episode, DYNAMIC, STATIC};

const HEAD_STREAM: u64 = 0x4EAD;

/// Per-cell binary downstream tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    /// Dynamic-object cells one step after the observed window.
    DetectDynamic,
    /// Static layout cells of the newest observed step.
    MapStatic,
}

impl FromStr for Task {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "detect-dynamic" => Ok(Task::DetectDynamic),
            "map-static" => Ok(Task::MapStatic),
            other => Err(PipelineError::UnknownTask(other.to_string())),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::DetectDynamic => "detect-dynamic",
            Task::MapStatic => "map-static",
        })
    }
}

impl Task {
    pub fn prompt(&self) -> TaskPrompt {
        match self {
            Task::DetectDynamic => TaskPrompt::detect_dynamic(),
            Task::MapStatic => TaskPrompt::map_static(),
        }
    }

    pub fn head_group(&self) -> &'static str {
        match self {
            Task::DetectDynamic => "head.detect",
            Task::MapStatic => "head.map",
        }
    }

    fn target_step(&self, ep: &Episode) -> usize {
        match self {
            Task::DetectDynamic => ep.t_obs,
            Task::MapStatic => ep.t_obs - 1,
        }
    }

    /// `H x W` cell targets: any slab of the task's class.
    pub fn target(&self, ep: &Episode) -> Vec<bool> {
        let class = match self {
            Task::DetectDynamic => DYNAMIC,
            Task::MapStatic => STATIC,
        };
        let plane = ep.height * ep.width;
        let y = ep.label(self.target_step(ep));
        (0..plane).map(|p| (0..ep.z_slabs).any(|z| y[z * plane + p] == class)).collect()
    }
}

/// Confusion counts of binary cell predictions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BinaryScores {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl BinaryScores {
    pub fn add(&mut self, pred: bool, truth: bool) {
        self.tp += (pred && truth) as u64;
        self.fp += (pred && !truth) as u64;
        self.fn_ += (!pred && truth) as u64;
    }

    /// 1 when there are no positives on either side.
    pub fn f1(&self) -> f64 {
        let d = 2 * self.tp + self.fp + self.fn_;
        if d == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / d as f64
        }
    }

    pub fn iou(&self) -> f64 {
        let d = self.tp + self.fp + self.fn_;
        if d == 0 {
            1.0
        } else {
            self.tp as f64 / d as f64
        }
    }
}

pub fn binary_scores(pred: &[bool], truth: &[bool]) -> BinaryScores {
    let mut s = BinaryScores::default();
    for (&p, &t) in pred.iter().zip(truth) {
        s.add(p, t);
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneReport {
    pub task: Task,
    pub pretrained: bool,
    pub steps: usize,
    pub final_loss: f64,
    pub scores: BinaryScores,
    /// F1 for detection, IoU for mapping.
    pub metric: f64,
    pub metrics: Vec<String>,
}

fn add_head(model: &mut Mssm<f64>, task: Task, seed: u64) -> Result<(), PipelineError> {
    let c = model.cfg.c_dec;
    model.params.add_conv(task.head_group(), c, 4, 1, &mut RngState::new(seed).fork(HEAD_STREAM))?;
    Ok(())
}

/// Cell logits `[H * W]` of the task head.
fn head_logits(
    model: &Mssm<f64>,
    t: &mut Tape<f64>,
    task: Task,
    ep: &Episode,
    prompt: &TaskPrompt,
    rng: &mut RngState,
    opts: &ForwardOptions,
) -> Result<Value, PipelineError> {
    let window = ep.truncated(ep.t_obs);
    let seq = model.observe_sequence(t, &window, prompt, rng, opts)?;
    let (h_tilde, s) = match task {
        Task::MapStatic => (seq.start.last.1, seq.start.last.2),
        Task::DetectDynamic => {
            let next = model.imagine(t, &seq.start, 1, prompt, rng, opts)?;
            (next[0].h_tilde, next[0].s)
        }
    };
    let u = model.decode_features(t, h_tilde, s, seq.start.b_hat, prompt)?;
    let o = nn::conv2d(t, task.head_group(), u, 1, 0)?;
    let o = nn::pixel_shuffle(&mut t.g, o, 2)?;
    Ok(t.g.reshape(o, &[ep.height * ep.width])?)
}

/// Mean weighted binary cross-entropy with logits,
/// `w y softplus(-x) + (1 - y) softplus(x)`.
pub fn weighted_bce(t: &mut Tape<f64>, logits: Value, target: &[bool], pos_weight: f64) -> Result<Value, PipelineError> {
    let n = target.len();
    let y: Vec<f64> = target.iter().map(|&b| b as u8 as f64).collect();
    let wy = t.g.constant(&[n], y.iter().map(|v| pos_weight * v).collect())?;
    let not_y = t.g.constant(&[n], y.iter().map(|v| 1.0 - v).collect())?;
    let neg = t.g.neg(logits);
    let sp_neg = t.g.softplus(neg);
    let sp_pos = t.g.softplus(logits);
    let a = t.g.mul(wy, sp_neg)?;
    let b = t.g.mul(not_y, sp_pos)?;
    let d = t.g.add(a, b)?;
    Ok(t.g.mean(d))
}

/// `cfg.pos_weight`, or `sqrt(negatives / positives)` over the training
/// targets when it is 0.
pub fn positive_weight(task: Task, cfg: &RunConfig, train: &[Episode]) -> f64 {
    if cfg.pos_weight > 0.0 {
        return cfg.pos_weight;
    }
    let (mut pos, mut total) = (0usize, 0usize);
    for ep in train {
        let y = task.target(ep);
        pos += y.iter().filter(|&&b| b).count();
        total += y.len();
    }
    if pos == 0 {
        1.0
    } else {
        ((total - pos) as f64 / pos as f64).sqrt().max(1.0)
    }
}

/// Trains a per-cell head for `task` on top of a fresh model, or of
/// `pretrained` weights when given, and scores it on `val`.
pub fn finetune(
    pretrained: Option<&Mssm<f64>>,
    task: Task,
    cfg: &RunConfig,
    train: &[Episode],
    val: &[Episode],
    prompt: Option<TaskPrompt>,
    metrics_path: Option<&Path>,
) -> Result<(Mssm<f64>, FinetuneReport), PipelineError> {
    cfg.validate()?;
    check_episodes(cfg, train, "fine-tuning set")?;
    check_episodes(cfg, val, "validation set")?;
    if task == Task::DetectDynamic && cfg.world.l_future < 1 {
        return Err(PipelineError::Config("detect-dynamic needs l_future >= 1".into()));
    }
    let prompt = prompt.unwrap_or_else(|| task.prompt());
    if prompt != task.prompt() {
        log::warn!("prompt `{}` does not belong to task {task}", prompt.text);
    }
    let mut model: Mssm<f64> = Mssm::new(cfg.model_config(), cfg.seed)?;
    if let Some(src) = pretrained {
        model.params.load_from(&src.params, |_| true)?;
    }
    add_head(&mut model, task, cfg.seed)?;
    if cfg.freeze_encoder {
        let names: Vec<String> = model.params.groups().iter().filter(|g| g.name.starts_with("enc.")).map(|g| g.name.clone()).collect();
        for n in names {
            model.params.set_frozen(&n, true)?;
        }
    }

    let kind = format!("finetune-{task}");
    let mut log = MetricsLog::new(&cfg.run_id(&kind), metrics_path)?;
    let opt = AdamConfig { lr: cfg.finetune_lr, beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.adam_eps };
    let opts = ForwardOptions::default();
    let pos_weight = positive_weight(task, cfg, train);
    log::info!("{kind}: positive weight {pos_weight:.3}");
    let mut adam = Adam::new();
    let mut final_loss = f64::NAN;
    for step in 0..cfg.finetune_steps {
        let mut grads = Grads::new();
        let mut loss_sum = 0.0;
        for (i, idx) in batch_indices(cfg.seed ^ HEAD_STREAM, step, cfg.finetune_batch, train.len()).into_iter().enumerate() {
            let ep = &train[idx];
            let mut t = model.tape(true);
            let logits = head_logits(&model, &mut t, task, ep, &prompt, &mut forward_rng(cfg.seed ^ HEAD_STREAM, step, i), &opts)?;
            let loss = weighted_bce(&mut t, logits, &task.target(ep), pos_weight)?;
            loss_sum += t.g.scalar(loss);
            t.g.backward(loss)?;
            accumulate(&mut grads, t.grads());
        }
        scale(&mut grads, 1.0 / cfg.finetune_batch as f64);
        final_loss = loss_sum / cfg.finetune_batch as f64;
        if !final_loss.is_finite() {
            return Err(PipelineError::NonFinite { step, breakdown: format!("bce {final_loss}") });
        }
        adam.step(&mut model.params, &grads, &opt)?;
        log.record(&kind, step, &[("bce".into(), final_loss)])?;
    }

    let eval_opts = ForwardOptions { zero_noise: true, ssp_frame: Some(cfg.world.t_obs - 1), ..Default::default() };
    let mut scores = BinaryScores::default();
    for (i, ep) in val.iter().enumerate() {
        let mut t = model.tape(false);
        let logits = head_logits(&model, &mut t, task, ep, &prompt, &mut RngState::new(cfg.seed).fork(i as u64), &eval_opts)?;
        for (&x, y) in t.g.data(logits).iter().zip(task.target(ep)) {
            scores.add(x > 0.0, y);
        }
    }
    let metric = match task {
        Task::DetectDynamic => scores.f1(),
        Task::MapStatic => scores.iou(),
    };
    let name = match task {
        Task::DetectDynamic => "f1",
        Task::MapStatic => "iou",
    };
    log.record(&format!("{kind}-eval"), cfg.finetune_steps, &[(name.into(), metric)])?;
    let metrics = log.finish()?;
    let report =
        FinetuneReport { task, pretrained: pretrained.is_some(), steps: cfg.finetune_steps, final_loss, scores, metric, metrics };
    Ok((model, report))
}
