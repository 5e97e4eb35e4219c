use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::scalar::Scalar;
use crate::numerics::tensor::Tensor;

/// Adam hyperparameters with decoupled weight decay.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Debug, Clone)]
struct Slot<F: Scalar> {
    tensor: Tensor<F>,
    m: Option<Vec<F>>,
    v: Option<Vec<F>>,
    /// Per-parameter step count; bias correction tracks how often this slot
    /// was actually updated, since single-path training touches subsets.
    steps: u64,
}

/// Named parameter map with per-parameter Adam state.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F: Scalar> {
    slots: BTreeMap<String, Slot<F>>,
    step: u64,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self { slots: BTreeMap::new(), step: 0 }
    }

    /// Global count of optimizer step invocations.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn insert(&mut self, path: &str, tensor: Tensor<F>) -> Result<()> {
        if self.slots.contains_key(path) {
            return Err(Error::State(format!("duplicate parameter path {path}")));
        }
        let tensor = tensor.with_grad();
        self.slots.insert(path.to_string(), Slot { tensor, m: None, v: None, steps: 0 });
        Ok(())
    }

    pub fn contains(&self, path: &str) -> bool {
        self.slots.contains_key(path)
    }

    pub fn get(&self, path: &str) -> Result<&Tensor<F>> {
        self.slots
            .get(path)
            .map(|s| &s.tensor)
            .ok_or_else(|| Error::Lookup(format!("no parameter at {path}")))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor<F>> {
        self.slots
            .get_mut(path)
            .map(|s| &mut s.tensor)
            .ok_or_else(|| Error::Lookup(format!("no parameter at {path}")))
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.slots.values().map(|s| s.tensor.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for slot in self.slots.values_mut() {
            slot.tensor.zero_grad();
        }
    }

    /// Bias-corrected Adam with decoupled weight decay on the named paths;
    /// gradients are cleared after the update. A path without a populated
    /// gradient is an error.
    pub fn adam_step_paths<S: AsRef<str>>(&mut self, cfg: &AdamConfig, paths: &[S]) -> Result<()> {
        self.step += 1;
        for path in paths {
            let path = path.as_ref();
            let slot = self
                .slots
                .get_mut(path)
                .ok_or_else(|| Error::Lookup(format!("no parameter at {path}")))?;
            let grad = slot
                .tensor
                .grad
                .take()
                .ok_or_else(|| Error::State(format!("missing gradient for {path}")))?;
            slot.steps += 1;
            let n = slot.tensor.numel();
            let m = slot.m.get_or_insert_with(|| vec![F::zero(); n]);
            let v = slot.v.get_or_insert_with(|| vec![F::zero(); n]);
            let b1 = F::from_f64(cfg.beta1);
            let b2 = F::from_f64(cfg.beta2);
            let lr = F::from_f64(cfg.lr);
            let eps = F::from_f64(cfg.eps);
            let wd = F::from_f64(cfg.weight_decay);
            let bc1 = F::from_f64(1.0 - cfg.beta1.powi(slot.steps as i32));
            let bc2 = F::from_f64(1.0 - cfg.beta2.powi(slot.steps as i32));
            let data = slot.tensor.data_mut();
            for i in 0..n {
                let g = grad[i];
                m[i] = b1 * m[i] + (F::one() - b1) * g;
                v[i] = b2 * v[i] + (F::one() - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] = data[i] - lr * (m_hat / (v_hat.sqrt() + eps) + wd * data[i]);
            }
        }
        Ok(())
    }

    /// Adam over every parameter in the store.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        let paths: Vec<String> = self.slots.keys().cloned().collect();
        self.adam_step_paths(cfg, &paths)
    }

    /// Moment buffers exist iff the slot has been stepped, and match shapes.
    pub fn check_moment_invariant(&self) -> Result<()> {
        for (path, slot) in &self.slots {
            let stepped = slot.steps > 0;
            let have = slot.m.is_some() && slot.v.is_some();
            if stepped != have {
                return Err(Error::State(format!(
                    "moment buffers out of sync for {path} (steps={})",
                    slot.steps
                )));
            }
            if let Some(m) = &slot.m {
                if m.len() != slot.tensor.numel() {
                    return Err(Error::State(format!("moment shape mismatch for {path}")));
                }
            }
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.slots.iter().map(|(k, v)| (k.as_str(), &v.tensor))
    }
}

/// Linear warmup to `peak_lr` over `warmup` steps, then linear decay to zero
/// at `total` steps.
pub fn warmup_linear_lr(step: u64, warmup: u64, total: u64, peak_lr: f64) -> f64 {
    if total == 0 {
        return peak_lr;
    }
    let step = step.min(total);
    if warmup > 0 && step < warmup {
        peak_lr * step as f64 / warmup as f64
    } else if total > warmup {
        peak_lr * (total - step) as f64 / (total - warmup) as f64
    } else {
        peak_lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with_scalar(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(v)).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut s = store_with_scalar(0.7);
        s.get_mut("w").unwrap().accumulate_grad(&[0.0]).unwrap();
        s.adam_step(&AdamConfig { weight_decay: 0.0, ..Default::default() }).unwrap();
        assert_eq!(s.get("w").unwrap().item().unwrap(), 0.7);
    }

    #[test]
    fn first_step_moves_by_lr_under_unit_gradient() {
        let mut s = store_with_scalar(1.0);
        s.get_mut("w").unwrap().accumulate_grad(&[1.0]).unwrap();
        let cfg = AdamConfig { lr: 0.01, ..Default::default() };
        s.adam_step(&cfg).unwrap();
        let w = s.get("w").unwrap().item().unwrap();
        // bias-corrected m_hat / sqrt(v_hat) is exactly 1 on the first step
        assert!((w - (1.0 - 0.01)).abs() < 1e-6, "w = {w}");
        assert!(s.get("w").unwrap().grad.is_none(), "grad cleared after step");
    }

    #[test]
    fn quadratic_descent_reaches_small_weight() {
        // f(w) = w^2, so grad = 2w; pure scalar descent oracle.
        let mut s = store_with_scalar(1.0);
        let cfg = AdamConfig { lr: 0.1, ..Default::default() };
        for _ in 0..100 {
            let w = s.get("w").unwrap().item().unwrap();
            s.get_mut("w").unwrap().accumulate_grad(&[2.0 * w]).unwrap();
            s.adam_step(&cfg).unwrap();
        }
        let w = s.get("w").unwrap().item().unwrap();
        assert!(w.abs() < 0.5, "w = {w}");
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut s = store_with_scalar(1.0);
        let err = s.adam_step(&AdamConfig::default());
        assert!(err.is_err());
    }

    #[test]
    fn moment_invariant_tracks_stepped_slots() {
        let mut s = ParamStore::<f64>::new();
        s.insert("a", Tensor::scalar(1.0)).unwrap();
        s.insert("b", Tensor::scalar(2.0)).unwrap();
        s.get_mut("a").unwrap().accumulate_grad(&[1.0]).unwrap();
        s.adam_step_paths(&AdamConfig::default(), &["a"]).unwrap();
        s.check_moment_invariant().unwrap();
    }

    #[test]
    fn duplicate_path_rejected() {
        let mut s = ParamStore::<f64>::new();
        s.insert("w", Tensor::scalar(1.0)).unwrap();
        assert!(s.insert("w", Tensor::scalar(2.0)).is_err());
    }

    #[test]
    fn lr_schedule_shape() {
        assert_eq!(warmup_linear_lr(0, 10, 100, 1.0), 0.0);
        assert_eq!(warmup_linear_lr(5, 10, 100, 1.0), 0.5);
        assert_eq!(warmup_linear_lr(10, 10, 100, 1.0), 1.0);
        assert_eq!(warmup_linear_lr(100, 10, 100, 1.0), 0.0);
        assert!((warmup_linear_lr(55, 10, 100, 1.0) - 0.5).abs() < 1e-12);
    }
}
