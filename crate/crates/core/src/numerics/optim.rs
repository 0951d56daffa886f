use thiserror::Error;

use super::params::ParamStore;
use super::tape::Gradients;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OptimError {
    #[error("no gradient for trainable parameter `{0}`")]
    MissingGradient(String),
}

/// Linear decay from `base_lr` at step 0 to zero at `total_steps`, no warm-up.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(base_lr: f64, total_steps: u64) -> Self {
        Self { base_lr, total_steps }
    }

    pub fn lr(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            return self.base_lr;
        }
        let remaining = self.total_steps.saturating_sub(step) as f64;
        self.base_lr * remaining / self.total_steps as f64
    }
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.tensor.numel()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// First moment of parameter `index`.
    pub fn first_moment(&self, index: usize) -> &[f64] {
        &self.first[index]
    }

    /// One update at learning rate `lr`. Frozen parameters (and their moments)
    /// are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<(), OptimError> {
        for (id, p) in store.iter() {
            if p.trainable && grads.get(id).is_none() {
                return Err(OptimError::MissingGradient(p.name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let g = grads.get(id).expect("checked above").data();
            let m = &mut self.first[id.0];
            let v = &mut self.second[id.0];
            for (i, theta) in p.tensor.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *theta -= lr * self.weight_decay * *theta;
                *theta -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
