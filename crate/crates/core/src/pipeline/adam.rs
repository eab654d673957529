use std::collections::BTreeMap;

use super::PipelineError;
use crate::nn::{Grads, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected adaptive moment state, keyed by full parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    pub t: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// One update of every trainable parameter that has a gradient. Frozen
    /// groups and parameters absent from `grads` are left untouched.
    pub fn step(&mut self, params: &mut ParamStore<f64>, grads: &Grads<f64>, cfg: &AdamConfig) -> Result<(), PipelineError> {
        for (name, e) in params.iter() {
            if let Some(g) = grads.get(&name) {
                if g.len() != e.data.len() {
                    return Err(PipelineError::Shape { name, expected: e.data.len(), got: g.len() });
                }
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (name, frozen, e) in params.iter_mut() {
            let Some(g) = grads.get(&name) else { continue };
            if frozen {
                continue;
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name).or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                e.data[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

/// Euclidean norm over every gradient.
pub fn global_norm(grads: &Grads<f64>) -> f64 {
    grads.values().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut Grads<f64>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let k = max_norm / norm;
        for g in grads.values_mut() {
            g.iter_mut().for_each(|x| *x *= k);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::RngState;

    fn scalar_store(x: f64) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.add_linear("w", 1, 1, &mut RngState::new(0)).unwrap();
        p.entry_mut("w", "w").unwrap().data = vec![x];
        p.entry_mut("w", "b").unwrap().data = vec![0.0];
        p
    }

    fn grads(g: f64) -> Grads<f64> {
        [("w.w".to_string(), vec![g])].into_iter().collect()
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = scalar_store(0.7);
        let mut adam = Adam::new();
        for _ in 0..3 {
            adam.step(&mut p, &grads(0.0), &AdamConfig::default()).unwrap();
        }
        assert_eq!(p.entry("w", "w").unwrap().data, vec![0.7]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar_store(1.0);
        let cfg = AdamConfig { eps: 0.0, ..AdamConfig::default() };
        Adam::new().step(&mut p, &grads(1.0), &cfg).unwrap();
        assert!((p.entry("w", "w").unwrap().data[0] - (1.0 - 2e-4)).abs() < 1e-15);
        // parameters without a gradient keep their value
        assert_eq!(p.entry("w", "b").unwrap().data, vec![0.0]);
    }

    #[test]
    fn three_step_trace() {
        let cfg = AdamConfig { lr: 0.1, beta1: 0.5, beta2: 0.75, eps: 1e-8 };
        let gs = [1.0, -2.0, 0.5];
        let mut p = scalar_store(0.0);
        let mut adam = Adam::new();
        for g in gs {
            adam.step(&mut p, &grads(g), &cfg).unwrap();
        }
        // hand-executed moments
        // t=1: m=0.5, v=0.25, m^=1, v^=1, x=-0.1
        // t=2: m=-0.75, v=1.1875, m^=-1, v^=1.1875/0.4375, x=-0.1+0.1/sqrt(2.7142857)
        // t=3: m=-0.125, v=0.953125, m^=-0.125/0.875, v^=0.953125/0.578125
        let x1 = -0.1 * 1.0 / (1.0 + 1e-8);
        let x2 = x1 - 0.1 * -1.0 / ((1.1875f64 / 0.4375).sqrt() + 1e-8);
        let x3 = x2 - 0.1 * (-0.125 / 0.875) / ((0.953125f64 / 0.578125).sqrt() + 1e-8);
        assert!((p.entry("w", "w").unwrap().data[0] - x3).abs() < 1e-14);
        assert_eq!(adam.t, 3);
    }

    #[test]
    fn frozen_groups_skipped_and_shapes_checked() {
        let mut p = scalar_store(0.3);
        p.set_frozen("w", true).unwrap();
        let mut adam = Adam::new();
        adam.step(&mut p, &grads(5.0), &AdamConfig::default()).unwrap();
        assert_eq!(p.entry("w", "w").unwrap().data, vec![0.3]);
        assert!(adam.m.is_empty());
        let bad: Grads<f64> = [("w.w".to_string(), vec![1.0, 2.0])].into_iter().collect();
        assert!(matches!(adam.step(&mut p, &bad, &AdamConfig::default()), Err(PipelineError::Shape { .. })));
    }

    #[test]
    fn embedding_rows_without_gradient_stay_put() {
        let mut p: ParamStore<f64> = ParamStore::new();
        p.add_embedding("table", 3, 2, &mut RngState::new(1)).unwrap();
        let before = p.entry("table", "table").unwrap().data.clone();
        let g: Grads<f64> = [("table.table".to_string(), vec![0.0, 0.0, 1.0, -1.0, 0.0, 0.0])].into_iter().collect();
        Adam::new().step(&mut p, &g, &AdamConfig::default()).unwrap();
        let after = &p.entry("table", "table").unwrap().data;
        assert_eq!(after[..2], before[..2]);
        assert_eq!(after[4..], before[4..]);
        assert_ne!(after[2..4], before[2..4]);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g: Grads<f64> = [("a".to_string(), vec![3.0, 4.0])].into_iter().collect();
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-15);
    }
}
