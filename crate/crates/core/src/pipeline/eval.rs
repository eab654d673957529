use serde_json::json;

use super::PipelineError;
use crate::grad::RngState;
use crate::model::{ForwardOptions, FutureMode, Mssm, TaskPrompt};
use crate::objective::{total_loss, LossWeights};
use crate::world::{Episode, FREE, NUM_CLASSES, UNKNOWN};

/// Intersection and union counts of a binary mask pair, accumulated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct IouCounts {
    pub inter: u64,
    pub union: u64,
}

impl IouCounts {
    pub fn add(&mut self, pred: bool, truth: bool) {
        self.inter += (pred && truth) as u64;
        self.union += (pred || truth) as u64;
    }

    /// 1 when both masks are empty.
    pub fn iou(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.inter as f64 / self.union as f64
        }
    }
}

pub fn mask_iou(pred: &[bool], truth: &[bool]) -> f64 {
    let mut c = IouCounts::default();
    for (&p, &t) in pred.iter().zip(truth) {
        c.add(p, t);
    }
    c.iou()
}

/// Geometric (occupied vs free) and per-class IoU over class grids.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GridScores {
    pub geometric: IouCounts,
    pub classes: [IouCounts; NUM_CLASSES],
}

impl GridScores {
    pub fn add(&mut self, pred: &[u8], truth: &[u8]) {
        for (&p, &t) in pred.iter().zip(truth) {
            self.geometric.add(p != FREE, t != FREE);
            for (c, counts) in self.classes.iter_mut().enumerate() {
                counts.add(p as usize == c, t as usize == c);
            }
        }
    }

    pub fn iou(&self) -> f64 {
        self.geometric.iou()
    }

    pub fn class_iou(&self) -> [f64; NUM_CLASSES] {
        self.classes.map(|c| c.iou())
    }

    pub fn miou(&self) -> f64 {
        self.class_iou().iter().sum::<f64>() / NUM_CLASSES as f64
    }
}

/// Per-voxel argmax of `(Z*C) x plane` logits with channel `z*C + c`.
pub fn argmax_classes(logits: &[f64], classes: usize, plane: usize) -> Vec<u8> {
    let z = logits.len() / (classes * plane);
    let mut out = Vec::with_capacity(z * plane);
    for zi in 0..z {
        for p in 0..plane {
            let best = (0..classes)
                .max_by(|&a, &b| logits[(zi * classes + a) * plane + p].total_cmp(&logits[(zi * classes + b) * plane + p]))
                .unwrap_or(0);
            out.push(best as u8);
        }
    }
    out
}

fn known(grid: &[u8]) -> Vec<u8> {
    grid.iter().map(|&c| if c == UNKNOWN { FREE } else { c }).collect()
}

/// The last observed frame, unknown voxels read as free.
pub fn copy_last_prediction(ep: &Episode) -> Vec<u8> {
    known(ep.observation(ep.t_obs - 1))
}

/// The last observed frame moved against `horizon` steps of the most recent
/// ego displacement; voxels entering the crop are free.
pub fn ego_shift_prediction(ep: &Episode, horizon: usize) -> Vec<u8> {
    let last = known(ep.observation(ep.t_obs - 1));
    if ep.t_obs < 2 {
        return last;
    }
    let a = ep.action(ep.t_obs - 2);
    let (dr, dc) = (a[0].round() as i64 * horizon as i64, a[1].round() as i64 * horizon as i64);
    let (h, w) = (ep.height as i64, ep.width as i64);
    let mut out = vec![FREE; last.len()];
    for z in 0..ep.z_slabs as i64 {
        for r in 0..h {
            for c in 0..w {
                let (sr, sc) = (r + dr, c + dc);
                if (0..h).contains(&sr) && (0..w).contains(&sc) {
                    out[((z * h + r) * w + c) as usize] = last[((z * h + sr) * w + sc) as usize];
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub episodes: usize,
    pub observed_iou: f64,
    pub observed_miou: f64,
    pub observed_class_iou: [f64; NUM_CLASSES],
    /// Geometric IoU of imagined steps, horizons `1..=L`.
    pub future_iou: Vec<f64>,
    pub future_miou: Vec<f64>,
    pub copy_last_iou: Vec<f64>,
    pub ego_shift_iou: Vec<f64>,
    /// Reference that copies the last observed step's complete labels, which
    /// no model input contains.
    pub copy_label_iou: Vec<f64>,
    pub action_mae: f64,
    pub future_action_mae: f64,
    /// Mean KL per observed step.
    pub kl: f64,
}

impl EvalReport {
    pub fn named(&self) -> Vec<(String, f64)> {
        let mut out = vec![
            ("observed_iou".to_string(), self.observed_iou),
            ("observed_miou".to_string(), self.observed_miou),
            ("action_mae".to_string(), self.action_mae),
            ("future_action_mae".to_string(), self.future_action_mae),
            ("kl".to_string(), self.kl),
        ];
        for (c, v) in ["free", "static", "dynamic"].iter().zip(self.observed_class_iou) {
            out.push((format!("observed_iou_{c}"), v));
        }
        for k in 0..self.future_iou.len() {
            out.push((format!("future_iou_{}", k + 1), self.future_iou[k]));
            out.push((format!("future_miou_{}", k + 1), self.future_miou[k]));
            out.push((format!("copy_last_iou_{}", k + 1), self.copy_last_iou[k]));
            out.push((format!("ego_shift_iou_{}", k + 1), self.ego_shift_iou[k]));
            out.push((format!("copy_label_iou_{}", k + 1), self.copy_label_iou[k]));
        }
        out
    }
}

/// Forward options for evaluation: latent means, the newest frame as the
/// propagated static feature.
fn eval_options(model: &Mssm<f64>) -> ForwardOptions {
    ForwardOptions { zero_noise: true, ssp_frame: Some(model.cfg.t_obs - 1), future: FutureMode::Rollout, ..Default::default() }
}

/// Scores observed-step reconstructions and imagined futures against labels,
/// next to the copy-last-frame and ego-shift baselines.
pub fn evaluate(model: &Mssm<f64>, episodes: &[Episode], seed: u64) -> Result<EvalReport, PipelineError> {
    if episodes.is_empty() {
        return Err(PipelineError::EmptySplit("evaluation set"));
    }
    let cfg = &model.cfg;
    let l = cfg.l_future;
    let plane = cfg.height * cfg.width;
    let opts = eval_options(model);
    let prompt = TaskPrompt::occupancy();
    let mut observed = GridScores::default();
    let mut future = vec![GridScores::default(); l];
    let mut copy = vec![GridScores::default(); l];
    let mut shift = vec![GridScores::default(); l];
    let mut label_copy = vec![GridScores::default(); l];
    let (mut mae, mut fmae, mut kl) = (0.0, 0.0, 0.0);
    for (i, ep) in episodes.iter().enumerate() {
        let mut t = model.tape(false);
        let seq = model.run(&mut t, ep, &prompt, &mut RngState::new(seed).fork(i as u64), &opts)?;
        let (_, b) = total_loss(&mut t.g, &seq, ep, &LossWeights::default())?;
        for (k, st) in seq.observed.iter().enumerate() {
            observed.add(&argmax_classes(t.g.data(st.logits), cfg.classes, plane), ep.label(k));
        }
        let copied = copy_last_prediction(ep);
        for (j, st) in seq.future.iter().enumerate() {
            let truth = ep.label(cfg.t_obs + j);
            future[j].add(&argmax_classes(t.g.data(st.logits), cfg.classes, plane), truth);
            copy[j].add(&copied, truth);
            shift[j].add(&ego_shift_prediction(ep, j + 1), truth);
            label_copy[j].add(ep.label(cfg.t_obs - 1), truth);
        }
        mae += b.past_act_l1 / cfg.t_obs as f64;
        fmae += if l > 0 { b.future_act_l1 / l as f64 } else { 0.0 };
        kl += b.kl_sum() / cfg.t_obs as f64;
    }
    let n = episodes.len() as f64;
    Ok(EvalReport {
        episodes: episodes.len(),
        observed_iou: observed.iou(),
        observed_miou: observed.miou(),
        observed_class_iou: observed.class_iou(),
        future_iou: future.iter().map(GridScores::iou).collect(),
        future_miou: future.iter().map(GridScores::miou).collect(),
        copy_last_iou: copy.iter().map(GridScores::iou).collect(),
        ego_shift_iou: shift.iter().map(GridScores::iou).collect(),
        copy_label_iou: label_copy.iter().map(GridScores::iou).collect(),
        action_mae: mae / n,
        future_action_mae: fmae / n,
        kl: kl / n,
    })
}

/// Imagined class grids next to the labels, for external plotting.
pub fn rollout_dump(model: &Mssm<f64>, ep: &Episode, seed: u64) -> Result<serde_json::Value, PipelineError> {
    let cfg = &model.cfg;
    let plane = cfg.height * cfg.width;
    let mut t = model.tape(false);
    let seq = model.run(&mut t, ep, &TaskPrompt::occupancy(), &mut RngState::new(seed), &eval_options(model))?;
    let frame = |step: usize, pred: Vec<u8>, kind: &str| {
        json!({
            "step": step,
            "kind": kind,
            "prediction": pred,
            "label": ep.label(step),
            "observation": if step < cfg.t_obs { Some(ep.observation(step)) } else { None },
        })
    };
    let mut frames = Vec::new();
    for (k, st) in seq.observed.iter().enumerate() {
        frames.push(frame(k, argmax_classes(t.g.data(st.logits), cfg.classes, plane), "observed"));
    }
    for (j, st) in seq.future.iter().enumerate() {
        frames.push(frame(cfg.t_obs + j, argmax_classes(t.g.data(st.logits), cfg.classes, plane), "imagined"));
    }
    Ok(json!({
        "shape": [cfg.z_slabs, cfg.height, cfg.width],
        "classes": ["free", "static", "dynamic"],
        "unknown": UNKNOWN,
        "frames": frames,
    }))
}
