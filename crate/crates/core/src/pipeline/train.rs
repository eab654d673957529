use std::path::Path;

use super::{clip_global_norm, Adam, AdamConfig, Checkpoint, MetricsLog, PipelineError, RunConfig};
use crate::grad::RngState;
use crate::model::{ForwardOptions, Mssm, TaskPrompt};
use crate::nn::Grads;
use crate::objective::{total_loss, LossBreakdown};
use crate::world::{Episode, Manifest, ManifestEntry};

const BATCH_STREAM: u64 = 0xBA7C;
const FORWARD_STREAM: u64 = 0xF0D;

#[derive(Debug)]
pub struct PretrainOutput {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<String>,
    /// Batch-mean total loss per step.
    pub totals: Vec<f64>,
    pub last: LossBreakdown,
}

pub fn load_episodes(manifest: &Manifest, entries: &[&ManifestEntry]) -> Result<Vec<Episode>, PipelineError> {
    entries.iter().map(|e| manifest.load(e).map_err(PipelineError::from)).collect()
}

pub(crate) fn check_episodes(cfg: &RunConfig, episodes: &[Episode], what: &'static str) -> Result<(), PipelineError> {
    if episodes.is_empty() {
        return Err(PipelineError::EmptySplit(what));
    }
    let w = &cfg.world;
    for ep in episodes {
        if (ep.height, ep.width, ep.z_slabs, ep.t_obs) != (w.height, w.width, w.z_slabs, w.t_obs) || ep.steps() < w.steps() {
            return Err(PipelineError::Config(format!(
                "episode {}x{}x{} with {} steps does not match the run config",
                ep.z_slabs,
                ep.height,
                ep.width,
                ep.steps()
            )));
        }
    }
    Ok(())
}

/// Draws `n` episode indices for a step, with replacement.
pub(crate) fn batch_indices(seed: u64, step: usize, n: usize, pool: usize) -> Vec<usize> {
    let mut rng = RngState::new(seed).fork(BATCH_STREAM).fork(step as u64);
    (0..n).map(|_| rng.below(pool)).collect()
}

pub(crate) fn forward_rng(seed: u64, step: usize, i: usize) -> RngState {
    RngState::new(seed).fork(FORWARD_STREAM).fork(step as u64).fork(i as u64)
}

pub(crate) fn accumulate(total: &mut Grads<f64>, g: Grads<f64>) {
    for (k, v) in g {
        match total.get_mut(&k) {
            Some(acc) => acc.iter_mut().zip(&v).for_each(|(a, b)| *a += b),
            None => {
                total.insert(k, v);
            }
        }
    }
}

pub(crate) fn scale(grads: &mut Grads<f64>, k: f64) {
    grads.values_mut().for_each(|g| g.iter_mut().for_each(|x| *x *= k));
}

/// Trains a fresh model on `episodes` with the loss over observed and
/// imagined steps. Deterministic given the config.
pub fn pretrain(cfg: &RunConfig, episodes: &[Episode], metrics_path: Option<&Path>) -> Result<PretrainOutput, PipelineError> {
    cfg.validate()?;
    check_episodes(cfg, episodes, "pretraining set")?;
    let mut model: Mssm<f64> = Mssm::new(cfg.model_config(), cfg.seed)?;
    let mut adam = Adam::new();
    let opt = AdamConfig { lr: cfg.lr, beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.adam_eps };
    let weights = cfg.loss_weights();
    let prompt = TaskPrompt::occupancy();
    let opts = ForwardOptions::default();
    let mut log = MetricsLog::new(&cfg.run_id("pretrain"), metrics_path)?;
    let mut totals = Vec::with_capacity(cfg.steps);
    let mut last = None;
    for step in 0..cfg.steps {
        let mut grads = Grads::new();
        let mut parts = Vec::with_capacity(cfg.batch);
        for (i, idx) in batch_indices(cfg.seed, step, cfg.batch, episodes.len()).into_iter().enumerate() {
            let ep = &episodes[idx];
            let mut t = model.tape(true);
            let seq = model.run(&mut t, ep, &prompt, &mut forward_rng(cfg.seed, step, i), &opts)?;
            let (loss, b) = total_loss(&mut t.g, &seq, ep, &weights)?;
            t.g.backward(loss)?;
            accumulate(&mut grads, t.grads());
            parts.push(b);
        }
        scale(&mut grads, 1.0 / cfg.batch as f64);
        let b = LossBreakdown::mean(&parts).expect("batch >= 1");
        let norm = clip_global_norm(&mut grads, cfg.grad_clip);
        if !b.total.is_finite() || !norm.is_finite() {
            return Err(PipelineError::NonFinite { step, breakdown: format!("{:?}", b.named()) });
        }
        adam.step(&mut model.params, &grads, &opt)?;
        let mut values = b.named();
        values.push(("grad_norm".into(), norm));
        log.record("pretrain", step, &values)?;
        if step % 50 == 0 || step + 1 == cfg.steps {
            log::info!("step {step}: total {:.4} kl {:.4} ce {:.4}", b.total, b.kl_sum(), b.past_ce + b.future_ce);
        }
        totals.push(b.total);
        last = Some(b);
    }
    let metrics_ref = log.run_id().to_string();
    let metrics = log.finish()?;
    let last = last.ok_or_else(|| PipelineError::Config("steps must be >= 1".into()))?;
    Ok(PretrainOutput { checkpoint: Checkpoint::new(cfg.clone(), model, adam, cfg.steps as u64, metrics_ref), metrics, totals, last })
}

/// Pretrains on the configured fraction of the manifest's training split.
pub fn pretrain_manifest(cfg: &RunConfig, manifest: &Manifest, metrics_path: Option<&Path>) -> Result<PretrainOutput, PipelineError> {
    let entries = manifest.train_fraction(cfg.data_fraction);
    let episodes = load_episodes(manifest, &entries)?;
    pretrain(cfg, &episodes, metrics_path)
}
