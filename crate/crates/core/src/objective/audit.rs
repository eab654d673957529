//! Numerical audit of the loss against the sequence lower bound.
//!
//! The loss is rebuilt term by term from log densities: the occupancy term
//! is `-(1/N) log Cat(y | logits)`, the action term `-(1/D) log Lap(a | a_hat, 1)
//! - ln 2`, and the latent term the closed-form KL. The sequence KL between the
//! factorized posterior and prior is estimated from sampled trajectories and
//! compared with the expected sum of stepwise KLs.

use std::f64::consts::{LN_2, PI};

use super::{kl_diag_gaussian, total_loss, LossWeights, ObjectiveError};
use crate::grad::RngState;
use crate::model::{ForwardOptions, FutureMode, Mssm, SequenceOutput, StepOutput, TaskPrompt};
use crate::world::Episode;

pub fn log_normal(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    -0.5 * z * z - sigma.ln() - 0.5 * (2.0 * PI).ln()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReadingReport {
    pub mode: FutureMode,
    pub total: f64,
    pub negated_bound: f64,
    /// `(term, |loss term - density term|)`.
    pub term_diffs: Vec<(String, f64)>,
    pub max_term_diff: f64,
    pub additivity_gap: f64,
    /// `|total - total_without_future - logged future terms|`.
    pub future_drop_gap: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ElboReport {
    pub rollout: ReadingReport,
    pub fixed: ReadingReport,
    pub trajectories: usize,
    /// Mean over trajectories of `sum_t log q(s_t) - log p(s_t)`.
    pub sequence_kl: f64,
    /// Mean over trajectories of `sum_t KL(q_t || p_t)`.
    pub stepwise_kl: f64,
    pub diff_mean: f64,
    pub diff_stderr: f64,
    pub deterministic_sequence: f64,
    pub deterministic_stepwise: f64,
}

impl ElboReport {
    pub fn terms_within(&self, tol: f64) -> bool {
        [&self.rollout, &self.fixed].iter().all(|r| {
            r.max_term_diff <= tol
                && r.additivity_gap <= tol
                && r.future_drop_gap <= tol
                && (r.total - r.negated_bound).abs() <= tol
        })
    }

    pub fn mc_within(&self, stderrs: f64) -> bool {
        self.diff_mean.abs() <= stderrs * self.diff_stderr
    }

    pub fn deterministic_gap(&self) -> f64 {
        (self.deterministic_sequence - self.deterministic_stepwise).abs() / self.deterministic_stepwise.abs().max(1.0)
    }
}

fn data(t: &crate::nn::Tape<f64>, v: crate::grad::Value) -> Vec<f64> {
    t.g.data(v).to_vec()
}

fn categorical_nll(logits: &[f64], labels: &[u8], classes: usize, plane: usize) -> f64 {
    let z = labels.len() / plane;
    let mut log_p = 0.0;
    for zi in 0..z {
        for p in 0..plane {
            let row: Vec<f64> = (0..classes).map(|c| logits[(zi * classes + c) * plane + p]).collect();
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            log_p += row[labels[zi * plane + p] as usize] - lse;
        }
    }
    -log_p / labels.len() as f64
}

fn laplace_term(pred: &[f64], target: &[f64]) -> f64 {
    let d = pred.len() as f64;
    let log_p: f64 = pred.iter().zip(target).map(|(m, x)| -(x - m).abs() - LN_2).sum();
    -(log_p + d * LN_2) / d
}

fn reading(
    model: &Mssm<f64>,
    ep: &Episode,
    seed: u64,
    mode: FutureMode,
) -> Result<ReadingReport, ObjectiveError> {
    let prompt = TaskPrompt::occupancy();
    let opts = ForwardOptions { future: mode, ssp_frame: Some(0), ..Default::default() };
    let mut t = model.tape(false);
    let mut rng = RngState::new(seed);
    let seq = model.run(&mut t, ep, &prompt, &mut rng, &opts)?;
    let weights = LossWeights::default();
    let (_, b) = total_loss(&mut t.g, &seq, ep, &weights)?;

    let mut diffs = Vec::new();
    let mut bound = 0.0;
    let mut check = |name: String, direct: f64, logged: f64| {
        bound += direct;
        diffs.push((name, (direct - logged).abs()));
    };
    let t_obs = seq.observed.len();
    for (k, st) in seq.observed.iter().enumerate() {
        let (q, p) = (st.posterior.unwrap(), st.prior.unwrap());
        let kl = kl_diag_gaussian(&data(&t, q.mu), &data(&t, q.sigma), &data(&t, p.mu), &data(&t, p.sigma))?;
        check(format!("kl_{}", k + 1), kl, b.kl[k]);
        check(format!("ce_{}", k + 1), categorical_nll(&data(&t, st.logits), ep.label(k), ep.classes, ep.height * ep.width), b.past_ce_steps[k]);
        check(format!("l1_{}", k + 1), laplace_term(&data(&t, st.action), &ep.action(k)), b.past_l1_steps[k]);
    }
    for (j, st) in seq.future.iter().enumerate() {
        let k = t_obs + j;
        check(format!("future_ce_{}", j + 1), categorical_nll(&data(&t, st.logits), ep.label(k), ep.classes, ep.height * ep.width), b.future_ce_steps[j]);
        check(format!("future_l1_{}", j + 1), laplace_term(&data(&t, st.action), &ep.action(k)), b.future_l1_steps[j]);
    }

    let past_only = SequenceOutput { future: Vec::new(), ..seq.clone() };
    let (_, b_past) = total_loss(&mut t.g, &past_only, ep, &weights)?;
    let future_logged = weights.future_ce * b.future_ce + weights.future_l1 * b.future_act_l1;
    let max_term_diff = diffs.iter().map(|d| d.1).fold(0.0, f64::max);
    Ok(ReadingReport {
        mode,
        total: b.total,
        negated_bound: bound,
        term_diffs: diffs,
        max_term_diff,
        additivity_gap: b.additivity_gap(),
        future_drop_gap: (b.total - b_past.total - future_logged).abs(),
    })
}

/// `(sum_t log q - log p at the samples, sum_t closed-form KL)` of one trajectory.
fn trajectory_kl(t: &crate::nn::Tape<f64>, steps: &[StepOutput]) -> Result<(f64, f64), ObjectiveError> {
    let (mut ratio, mut stepwise) = (0.0, 0.0);
    for st in steps {
        let (q, p) = (st.posterior.unwrap(), st.prior.unwrap());
        let (mq, sq, mp, sp, s) = (data(t, q.mu), data(t, q.sigma), data(t, p.mu), data(t, p.sigma), data(t, st.s));
        stepwise += kl_diag_gaussian(&mq, &sq, &mp, &sp)?;
        for i in 0..s.len() {
            ratio += log_normal(s[i], mq[i], sq[i]) - log_normal(s[i], mp[i], sp[i]);
        }
    }
    Ok((ratio, stepwise))
}

/// Runs the bound audit on a micro configuration.
pub fn elbo_audit(model: &Mssm<f64>, ep: &Episode, seed: u64, trajectories: usize) -> Result<ElboReport, ObjectiveError> {
    let cfg = &model.cfg;
    if cfg.t_obs > 3 || cfg.l_future > 2 || cfg.d_s > 4 {
        return Err(ObjectiveError::Audit(format!(
            "micro config needs t_obs <= 3, l_future <= 2, d_s <= 4 (got {}, {}, {})",
            cfg.t_obs, cfg.l_future, cfg.d_s
        )));
    }
    if trajectories < 2 {
        return Err(ObjectiveError::Audit("at least two trajectories".into()));
    }
    let rollout = reading(model, ep, seed, FutureMode::Rollout)?;
    let fixed = reading(model, ep, seed, FutureMode::Fixed)?;

    let prompt = TaskPrompt::occupancy();
    let opts = ForwardOptions { ssp_frame: Some(0), ..Default::default() };
    let base = RngState::new(seed).fork(0xA0D1);
    let (mut sum_r, mut sum_k, mut sum_d, mut sum_d2) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..trajectories {
        let mut t = model.tape(false);
        let mut rng = base.fork(i as u64);
        let seq = model.observe_sequence(&mut t, ep, &prompt, &mut rng, &opts)?;
        let (r, k) = trajectory_kl(&t, &seq.observed)?;
        sum_r += r;
        sum_k += k;
        sum_d += r - k;
        sum_d2 += (r - k) * (r - k);
    }
    let n = trajectories as f64;
    let diff_mean = sum_d / n;
    let var = (sum_d2 / n - diff_mean * diff_mean).max(0.0) * n / (n - 1.0);

    let det_opts = ForwardOptions { sigma_at_floor: true, zero_noise: true, ssp_frame: Some(0), ..Default::default() };
    let mut t = model.tape(false);
    let seq = model.observe_sequence(&mut t, ep, &prompt, &mut RngState::new(seed), &det_opts)?;
    let (det_r, det_k) = trajectory_kl(&t, &seq.observed)?;

    Ok(ElboReport {
        rollout,
        fixed,
        trajectories,
        sequence_kl: sum_r / n,
        stepwise_kl: sum_k / n,
        diff_mean,
        diff_stderr: (var / n).sqrt(),
        deterministic_sequence: det_r,
        deterministic_stepwise: det_k,
    })
}
