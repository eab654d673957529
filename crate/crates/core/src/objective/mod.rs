//! Pre-training loss: latent matching KL, occupancy cross-entropy and action
//! L1 over the observed window and the imagined future.

mod audit;

pub use audit::{elbo_audit, log_normal, ElboReport, ReadingReport};

use crate::grad::{Graph, RngState, Value};
use crate::model::{Gaussian, ModelError, SequenceOutput};
use crate::nn::NnError;
use crate::scalar::Scalar;
use crate::world::Episode;

/// Smallest standard deviation accepted by the KL functions.
pub const SIGMA_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ObjectiveError {
    #[error("{what}: lengths {a} and {b} differ")]
    Length { what: &'static str, a: usize, b: usize },
    #[error("label at voxel {0} is not one-hot")]
    NotOneHot(usize),
    #[error("sigma {sigma} below floor at index {index}")]
    BelowFloor { index: usize, sigma: f64 },
    #[error("expected {expected} steps, got {got}")]
    StepMismatch { expected: usize, got: usize },
    #[error("non-finite loss component `{0}`")]
    NonFinite(String),
    #[error("audit precondition: {0}")]
    Audit(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<NnError> for ObjectiveError {
    fn from(e: NnError) -> Self {
        ObjectiveError::Model(e.into())
    }
}

impl From<crate::grad::GradError> for ObjectiveError {
    fn from(e: crate::grad::GradError) -> Self {
        ObjectiveError::Model(e.into())
    }
}

fn same_len(what: &'static str, a: usize, b: usize) -> Result<(), ObjectiveError> {
    if a == b {
        Ok(())
    } else {
        Err(ObjectiveError::Length { what, a, b })
    }
}

fn check_floor(sigma: &[f64]) -> Result<(), ObjectiveError> {
    match sigma.iter().position(|&s| !(s >= SIGMA_FLOOR * (1.0 - 1e-12))) {
        Some(index) => Err(ObjectiveError::BelowFloor { index, sigma: sigma[index] }),
        None => Ok(()),
    }
}

/// `KL(N(mu_q, sigma_q^2) || N(mu_p, sigma_p^2))` for diagonal Gaussians.
pub fn kl_diag_gaussian(mu_q: &[f64], sigma_q: &[f64], mu_p: &[f64], sigma_p: &[f64]) -> Result<f64, ObjectiveError> {
    let n = mu_q.len();
    for len in [sigma_q.len(), mu_p.len(), sigma_p.len()] {
        same_len("kl", n, len)?;
    }
    check_floor(sigma_q)?;
    check_floor(sigma_p)?;
    Ok((0..n)
        .map(|i| {
            let (sq, sp) = (sigma_q[i], sigma_p[i]);
            let d = mu_q[i] - mu_p[i];
            (sp / sq).ln() + (sq * sq + d * d) / (2.0 * sp * sp) - 0.5
        })
        .sum())
}

/// Monte-Carlo estimate of the same KL with its standard error.
pub fn kl_monte_carlo(
    mu_q: &[f64],
    sigma_q: &[f64],
    mu_p: &[f64],
    sigma_p: &[f64],
    n: usize,
    seed: u64,
) -> Result<(f64, f64), ObjectiveError> {
    let d = mu_q.len();
    for len in [sigma_q.len(), mu_p.len(), sigma_p.len()] {
        same_len("kl_monte_carlo", d, len)?;
    }
    if n < 2 {
        return Err(ObjectiveError::Length { what: "kl_monte_carlo samples", a: n, b: 2 });
    }
    let mut rng = RngState::new(seed);
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    const CHUNK: usize = 4096;
    let mut done = 0;
    while done < n {
        let m = CHUNK.min(n - done);
        let eps = rng.normals(m * d);
        for e in eps.chunks_exact(d.max(1)).take(m) {
            let mut r = 0.0;
            for i in 0..d {
                let s = mu_q[i] + sigma_q[i] * e[i];
                r += log_normal(s, mu_q[i], sigma_q[i]) - log_normal(s, mu_p[i], sigma_p[i]);
            }
            sum += r;
            sum_sq += r * r;
        }
        done += m;
    }
    let mean = sum / n as f64;
    let var = (sum_sq / n as f64 - mean * mean).max(0.0) * n as f64 / (n as f64 - 1.0);
    Ok((mean, (var / n as f64).sqrt()))
}

/// Differentiable closed-form KL between two graph Gaussians.
pub fn kl_graph<S: Scalar>(g: &mut Graph<S>, q: &Gaussian, p: &Gaussian) -> Result<Value, ObjectiveError> {
    let lq = g.log(q.sigma);
    let lp = g.log(p.sigma);
    let log_ratio = g.sub(lp, lq)?;
    let vq = g.square(q.sigma);
    let d = g.sub(q.mu, p.mu)?;
    let d2 = g.square(d);
    let num = g.add(vq, d2)?;
    let vp = g.square(p.sigma);
    let den = g.scale(vp, S::lit(2.0));
    let frac = g.div(num, den)?;
    let terms = g.add(log_ratio, frac)?;
    let terms = g.offset(terms, S::lit(-0.5));
    Ok(g.sum(terms))
}

/// Mean over voxels of `-log softmax(logits)[true class]`. `logits` is
/// `(Z*C) x plane` with channel `z*C + c`; `onehot` has the same layout.
pub fn occupancy_ce(logits: &[f64], onehot: &[f64], classes: usize, plane: usize) -> Result<f64, ObjectiveError> {
    same_len("occupancy_ce", logits.len(), onehot.len())?;
    if plane == 0 || classes == 0 || logits.len() % (classes * plane) != 0 {
        return Err(ObjectiveError::Length { what: "occupancy_ce grid", a: logits.len(), b: classes * plane });
    }
    let z = logits.len() / (classes * plane);
    let mut total = 0.0;
    for zi in 0..z {
        for p in 0..plane {
            let at = |c: usize| (zi * classes + c) * plane + p;
            let hot: Vec<f64> = (0..classes).map(|c| onehot[at(c)]).collect();
            let ones = hot.iter().filter(|&&v| v == 1.0).count();
            if ones != 1 || hot.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(ObjectiveError::NotOneHot(zi * plane + p));
            }
            let m = (0..classes).map(|c| logits[at(c)]).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + (0..classes).map(|c| (logits[at(c)] - m).exp()).sum::<f64>().ln();
            let truth = hot.iter().position(|&v| v == 1.0).unwrap();
            total += lse - logits[at(truth)];
        }
    }
    Ok(total / (z * plane) as f64)
}

/// Differentiable occupancy cross-entropy against `Z x plane` class labels.
pub fn occupancy_ce_graph<S: Scalar>(
    g: &mut Graph<S>,
    logits: Value,
    labels: &[u8],
    classes: usize,
) -> Result<Value, ObjectiveError> {
    let shape = g.shape(logits).to_vec();
    let plane: usize = shape[1..].iter().product();
    let z = shape[0] / classes;
    same_len("occupancy_ce labels", z * plane, labels.len())?;
    let onehot = crate::world::onehot(labels, classes, plane);
    if let Some(i) = labels.iter().position(|&c| c as usize >= classes) {
        return Err(ObjectiveError::NotOneHot(i));
    }
    let grid = g.reshape(logits, &[z, classes, plane])?;
    let lp = g.log_softmax(grid, 1)?;
    let hot = g.constant(&[z, classes, plane], onehot.into_iter().map(S::lit).collect())?;
    let picked = g.mul(lp, hot)?;
    let s = g.sum(picked);
    Ok(g.scale(s, S::lit(-1.0 / (z * plane) as f64)))
}

/// Mean absolute error over action components.
pub fn action_l1(pred: &[f64], target: &[f64]) -> Result<f64, ObjectiveError> {
    same_len("action_l1", pred.len(), target.len())?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    Ok(pred.iter().zip(target).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.len() as f64)
}

pub fn action_l1_graph<S: Scalar>(g: &mut Graph<S>, pred: Value, target: &[f64]) -> Result<Value, ObjectiveError> {
    same_len("action_l1", g.data(pred).len(), target.len())?;
    let t = g.constant(&[target.len()], target.iter().map(|&x| S::lit(x)).collect())?;
    let d = g.sub(pred, t)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub kl: f64,
    pub past_ce: f64,
    pub past_l1: f64,
    pub future_ce: f64,
    pub future_l1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { kl: 1.0, past_ce: 1.0, past_l1: 1.0, future_ce: 1.0, future_l1: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub kl: Vec<f64>,
    /// Per-step terms, summed into the totals below.
    pub past_ce_steps: Vec<f64>,
    pub past_l1_steps: Vec<f64>,
    pub future_ce_steps: Vec<f64>,
    pub future_l1_steps: Vec<f64>,
    pub past_ce: f64,
    pub past_act_l1: f64,
    pub future_ce: f64,
    pub future_act_l1: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    pub fn kl_sum(&self) -> f64 {
        self.kl.iter().sum()
    }

    /// Weighted component sum, independent of the graph that produced `total`.
    pub fn recompute_total(&self) -> f64 {
        let w = &self.weights;
        w.kl * self.kl_sum()
            + w.past_ce * self.past_ce
            + w.past_l1 * self.past_act_l1
            + w.future_ce * self.future_ce
            + w.future_l1 * self.future_act_l1
    }

    pub fn additivity_gap(&self) -> f64 {
        (self.total - self.recompute_total()).abs()
    }

    /// Flat named values for metric records.
    pub fn named(&self) -> Vec<(String, f64)> {
        let mut out = vec![
            ("total".to_string(), self.total),
            ("kl".to_string(), self.kl_sum()),
            ("past_ce".to_string(), self.past_ce),
            ("past_act_l1".to_string(), self.past_act_l1),
            ("future_ce".to_string(), self.future_ce),
            ("future_act_l1".to_string(), self.future_act_l1),
        ];
        out.extend(self.kl.iter().enumerate().map(|(i, v)| (format!("kl_{}", i + 1), *v)));
        out
    }

    /// Averages breakdowns of equal structure, e.g. over a batch.
    pub fn mean(items: &[LossBreakdown]) -> Option<LossBreakdown> {
        let first = items.first()?;
        let n = items.len() as f64;
        let avg = |f: &dyn Fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        let avg_vec = |f: &dyn Fn(&LossBreakdown) -> &Vec<f64>| -> Vec<f64> {
            (0..f(first).len()).map(|i| items.iter().map(|b| f(b)[i]).sum::<f64>() / n).collect()
        };
        Some(LossBreakdown {
            kl: avg_vec(&|b| &b.kl),
            past_ce_steps: avg_vec(&|b| &b.past_ce_steps),
            past_l1_steps: avg_vec(&|b| &b.past_l1_steps),
            future_ce_steps: avg_vec(&|b| &b.future_ce_steps),
            future_l1_steps: avg_vec(&|b| &b.future_l1_steps),
            past_ce: avg(&|b| b.past_ce),
            past_act_l1: avg(&|b| b.past_act_l1),
            future_ce: avg(&|b| b.future_ce),
            future_act_l1: avg(&|b| b.future_act_l1),
            total: avg(&|b| b.total),
            weights: first.weights,
        })
    }
}

/// Builds the weighted loss on the graph and its breakdown. Observed steps
/// contribute KL, cross-entropy and action L1; imagined steps contribute
/// cross-entropy and action L1 against the ground truth that followed.
pub fn total_loss<S: Scalar>(
    g: &mut Graph<S>,
    seq: &SequenceOutput,
    ep: &Episode,
    weights: &LossWeights,
) -> Result<(Value, LossBreakdown), ObjectiveError> {
    let t_obs = seq.observed.len();
    let need = t_obs + seq.future.len();
    if ep.steps() < need {
        return Err(ObjectiveError::StepMismatch { expected: need, got: ep.steps() });
    }
    let classes = ep.classes;
    let mut terms: Vec<Value> = Vec::new();
    let mut b = LossBreakdown {
        kl: vec![],
        past_ce_steps: vec![],
        past_l1_steps: vec![],
        future_ce_steps: vec![],
        future_l1_steps: vec![],
        past_ce: 0.0,
        past_act_l1: 0.0,
        future_ce: 0.0,
        future_act_l1: 0.0,
        total: 0.0,
        weights: *weights,
    };
    let mut push = |g: &mut Graph<S>, v: Value, w: f64| -> f64 {
        let x = g.scalar(v).as_f64();
        if w != 0.0 {
            terms.push(if w == 1.0 { v } else { g.scale(v, S::lit(w)) });
        }
        x
    };
    for (k, st) in seq.observed.iter().enumerate() {
        let (q, p) = match (st.posterior, st.prior) {
            (Some(q), Some(p)) => (q, p),
            _ => return Err(ObjectiveError::StepMismatch { expected: t_obs, got: k }),
        };
        let kl = kl_graph(g, &q, &p)?;
        b.kl.push(push(g, kl, weights.kl));
        let ce = occupancy_ce_graph(g, st.logits, ep.label(k), classes)?;
        b.past_ce_steps.push(push(g, ce, weights.past_ce));
        let l1 = action_l1_graph(g, st.action, &ep.action(k))?;
        b.past_l1_steps.push(push(g, l1, weights.past_l1));
    }
    for (j, st) in seq.future.iter().enumerate() {
        let k = t_obs + j;
        let ce = occupancy_ce_graph(g, st.logits, ep.label(k), classes)?;
        b.future_ce_steps.push(push(g, ce, weights.future_ce));
        let l1 = action_l1_graph(g, st.action, &ep.action(k))?;
        b.future_l1_steps.push(push(g, l1, weights.future_l1));
    }
    b.past_ce = b.past_ce_steps.iter().sum();
    b.past_act_l1 = b.past_l1_steps.iter().sum();
    b.future_ce = b.future_ce_steps.iter().sum();
    b.future_act_l1 = b.future_l1_steps.iter().sum();
    let total = match terms.len() {
        0 => g.scalar_const(S::zero()),
        _ => {
            let scalars: Vec<Value> = terms.iter().map(|&v| g.reshape(v, &[1])).collect::<Result<_, _>>()?;
            let stacked = g.concat(&scalars, 0)?;
            g.sum(stacked)
        }
    };
    b.total = g.scalar(total).as_f64();
    for (name, v) in b.named() {
        if !v.is_finite() {
            return Err(ObjectiveError::NonFinite(name));
        }
    }
    let tol = 1e-9f64.max(S::epsilon().as_f64() * 16.0 * b.total.abs().max(1.0));
    debug_assert!(b.additivity_gap() <= tol, "loss additivity violated");
    Ok((total, b))
}
