use serde::{Deserialize, Serialize};

use super::{NeuralError, ParamVector};

/// AdamW hyperparameters with a linear warm-up schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Fraction of `total_steps` spent ramping the learning rate up from 0.
    pub warmup_fraction: f64,
    pub total_steps: u64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-2, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, warmup_fraction: 0.1, total_steps: 300 }
    }
}

impl AdamWConfig {
    /// Learning rate at step counter `step` (0-based, before the update).
    pub fn lr_at(&self, step: u64) -> f64 {
        let warmup = self.warmup_fraction * self.total_steps as f64;
        if warmup <= 0.0 {
            self.lr
        } else {
            self.lr * (step as f64 / warmup).min(1.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub m: ParamVector,
    pub v: ParamVector,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, like: &ParamVector) -> Self {
        Self { config, m: like.zeros_like(), v: like.zeros_like(), step: 0 }
    }

    pub fn effective_lr(&self) -> f64 {
        self.config.lr_at(self.step)
    }

    /// In-place decoupled-weight-decay Adam update.
    pub fn apply(&mut self, params: &mut ParamVector, grads: &ParamVector) -> Result<(), NeuralError> {
        params.check_same_layout(grads)?;
        params.check_same_layout(&self.m)?;
        let AdamWConfig { beta1, beta2, eps, weight_decay, .. } = self.config;
        let lr = self.effective_lr();
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);

        let mut params_arrays = std::mem::take(params).into_arrays();
        let mut m_arrays = std::mem::take(&mut self.m).into_arrays();
        let mut v_arrays = std::mem::take(&mut self.v).into_arrays();
        for (((p, g), m), v) in params_arrays.iter_mut().zip(grads.arrays()).zip(&mut m_arrays).zip(&mut v_arrays) {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                let mi = beta1 * m.data[i] + (1.0 - beta1) * gi;
                let vi = beta2 * v.data[i] + (1.0 - beta2) * gi * gi;
                m.data[i] = mi;
                v.data[i] = vi;
                let m_hat = mi / bc1;
                let denom = (vi / bc2).sqrt() + eps;
                let adam = if denom > 0.0 { m_hat / denom } else { 0.0 };
                let theta = p.data[i];
                p.data[i] = theta - lr * (adam + weight_decay * theta);
            }
        }
        *params = ParamVector::from_arrays(params_arrays);
        self.m = ParamVector::from_arrays(m_arrays);
        self.v = ParamVector::from_arrays(v_arrays);
        self.step += 1;
        Ok(())
    }
}

/// Value-semantics wrapper around [`OptimizerState::apply`].
pub fn adamw_step(
    state: &OptimizerState,
    params: &ParamVector,
    grads: &ParamVector,
) -> Result<(ParamVector, OptimizerState), NeuralError> {
    let mut state = state.clone();
    let mut params = params.clone();
    state.apply(&mut params, grads)?;
    Ok((params, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::NamedArray;

    fn scalar(x: f64) -> ParamVector {
        ParamVector::from_arrays(vec![NamedArray { name: "x".into(), shape: vec![1], data: vec![x] }])
    }

    fn no_warmup(lr: f64, eps: f64, wd: f64) -> AdamWConfig {
        AdamWConfig { lr, beta1: 0.9, beta2: 0.999, eps, weight_decay: wd, warmup_fraction: 0.0, total_steps: 100 }
    }

    #[test]
    fn zero_gradient_without_decay_is_fixed_point() {
        let p = scalar(1.5);
        let s = OptimizerState::new(no_warmup(0.1, 1e-8, 0.0), &p);
        let (q, s2) = adamw_step(&s, &p, &scalar(0.0)).unwrap();
        assert_eq!(q, p);
        assert_eq!(s2.step, 1);
    }

    #[test]
    fn first_step_matches_hand_value() {
        // m̂ = 1, v̂ = 1, so the update is exactly -lr.
        let p = scalar(0.0);
        let s = OptimizerState::new(no_warmup(0.1, 0.0, 0.0), &p);
        let (q, _) = adamw_step(&s, &p, &scalar(1.0)).unwrap();
        assert!((q.flat_get(0) + 0.1).abs() < 1e-15);
    }

    #[test]
    fn warmup_starts_at_zero() {
        let cfg = AdamWConfig { warmup_fraction: 0.1, total_steps: 100, ..AdamWConfig::default() };
        assert_eq!(cfg.lr_at(0), 0.0);
        assert_eq!(cfg.lr_at(5), cfg.lr * 0.5);
        assert_eq!(cfg.lr_at(10), cfg.lr);
        assert_eq!(cfg.lr_at(99), cfg.lr);
    }

    #[test]
    fn decay_only_shrinks_by_lr_wd_theta() {
        let p = scalar(2.0);
        let cfg = no_warmup(0.1, 1e-8, 0.5);
        let s = OptimizerState::new(cfg, &p);
        let (q, _) = adamw_step(&s, &p, &scalar(0.0)).unwrap();
        assert_eq!(q.flat_get(0), 2.0 - 0.1 * 0.5 * 2.0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let p = scalar(0.0);
        let s = OptimizerState::new(AdamWConfig::default(), &p);
        let bad = ParamVector::from_arrays(vec![NamedArray::zeros("y", &[1])]);
        assert!(adamw_step(&s, &p, &bad).is_err());
    }
}
