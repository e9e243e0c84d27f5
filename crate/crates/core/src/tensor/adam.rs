//! Adam with bias correction and a plateau learning-rate schedule.

use std::collections::BTreeMap;

use super::graph::Gradients;
use super::params::ParamStore;
use crate::error::{contract, Result};

/// Hyper-parameters of the plateau schedule.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct PlateauSchedule {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
}

impl Default for PlateauSchedule {
    fn default() -> Self {
        Self {
            factor: 0.8,
            patience: 5,
            min_lr: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    /// β1 = 0.9, β2 = 0.999, ε = 1e-8.
    pub fn new(lr: f64) -> Self {
        Self::with_betas(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            step: 0,
            lr,
            beta1,
            beta2,
            eps,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One bias-corrected Adam update of every parameter that has a gradient.
    /// Parameters without a gradient are left untouched; the step counter
    /// always advances by one.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(contract(format!("learning rate must be positive, got {}", self.lr)));
        }
        for (name, g) in grads.named() {
            let p = params
                .get(name)
                .ok_or_else(|| contract(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(contract(format!(
                    "gradient shape {:?} != parameter shape {:?} for `{name}`",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads.named() {
            let p = params.get_mut(name).expect("checked above");
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            for (k, (&gk, pk)) in g.data().iter().zip(p.data_mut()).enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                *pk -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// First-moment accumulator for a parameter, if it has been updated.
    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.m.get(name).map(Vec::as_slice)
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f64]> {
        self.v.get(name).map(Vec::as_slice)
    }
}

/// Learning rate after observing `history` (oldest first).
///
/// Decays by `factor` when the minimum of the last `patience` entries is not
/// below the minimum of everything earlier, then clamps at `min_lr`.
pub fn lr_schedule(lr: f64, history: &[f64], schedule: &PlateauSchedule) -> f64 {
    if history.len() <= schedule.patience {
        return lr;
    }
    let split = history.len() - schedule.patience;
    let recent = history[split..].iter().copied().fold(f64::INFINITY, f64::min);
    let earlier = history[..split].iter().copied().fold(f64::INFINITY, f64::min);
    if recent >= earlier {
        (lr * schedule.factor).max(schedule.min_lr)
    } else {
        lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use crate::tensor::Graph;

    fn grads_for(name: &str, value: f64, g: f64) -> (ParamStore, Gradients) {
        let mut store = ParamStore::new();
        store.insert(name, Tensor::scalar(value));
        let mut graph = Graph::new();
        let p = graph.bind(&store, name).unwrap();
        let s = graph.scale(p, g).unwrap();
        let grads = graph.backward(s).unwrap();
        (store, grads)
    }

    #[test]
    fn zero_gradient_leaves_params_and_bumps_step() {
        let (mut store, grads) = grads_for("p", 0.3, 0.0);
        let mut adam = AdamState::new(0.1);
        for _ in 0..7 {
            adam.step(&mut store, &grads).unwrap();
        }
        assert_eq!(store.get("p").unwrap().item(), 0.3);
        assert_eq!(adam.step, 7);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut store, grads) = grads_for("p", 0.0, 1.0);
        let mut adam = AdamState::new(0.1);
        adam.step(&mut store, &grads).unwrap();
        let p = store.get("p").unwrap().item();
        assert!((p + 0.1).abs() < 1e-8, "{p}");
    }

    #[test]
    fn nonpositive_lr_is_rejected() {
        let (mut store, grads) = grads_for("p", 0.0, 1.0);
        assert!(AdamState::new(0.0).step(&mut store, &grads).is_err());
    }

    #[test]
    fn schedule_cases() {
        let s = PlateauSchedule::default();
        assert_eq!(lr_schedule(1e-4, &[], &s), 1e-4);
        assert_eq!(lr_schedule(1e-4, &[6.0, 5.0, 4.0, 3.0, 2.0, 1.0, 0.5], &s), 1e-4);
        assert!((lr_schedule(1e-4, &[1.0; 6], &s) - 8e-5).abs() < 1e-18);
        assert_eq!(lr_schedule(1.2e-6, &[1.0; 6], &s), 1e-6);
        // fewer than patience+1 entries: nothing to compare against
        assert_eq!(lr_schedule(1e-4, &[1.0; 5], &s), 1e-4);
    }
}
