//! SGD with momentum under a cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{MhdError, Result};
use crate::nn::{ClientModel, ModelGrads};

/// `base_lr · ½(1 + cos(π·t/T))`, clamped to zero for `t ≥ T`.
pub fn cosine_lr(base_lr: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return 0.0;
    }
    let frac = step as f64 / total_steps as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptState {
    pub velocity: Vec<Vec<f64>>,
    pub step: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub total_steps: usize,
}

impl OptState {
    pub fn new(model: &ClientModel, base_lr: f64, momentum: f64, total_steps: usize) -> Self {
        Self {
            velocity: model.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
            step: 0,
            base_lr,
            momentum,
            total_steps,
        }
    }

    pub fn current_lr(&self) -> f64 {
        cosine_lr(self.base_lr, self.step, self.total_steps)
    }

    pub fn reset_momentum(&mut self) {
        self.velocity.iter_mut().flatten().for_each(|v| *v = 0.0);
    }
}

/// One update: `v ← μ·v + g`, `θ ← θ − lr(t)·v`, then `t ← t + 1`.
pub fn sgd_step(model: &mut ClientModel, grads: &ModelGrads, opt: &mut OptState) -> Result<()> {
    let lr = opt.current_lr();
    let mu = opt.momentum;
    let mut params = model.tensors_mut();
    if params.len() != grads.tensors.len() || params.len() != opt.velocity.len() {
        return Err(MhdError::Shape("parameters, gradients and momentum buffers differ in tensor count".into()));
    }
    for ((theta, g), v) in params.iter_mut().zip(&grads.tensors).zip(&mut opt.velocity) {
        if theta.len() != g.len() || theta.len() != v.len() {
            return Err(MhdError::Shape("tensor length mismatch in sgd_step".into()));
        }
        for ((p, &gi), vi) in theta.iter_mut().zip(g).zip(v.iter_mut()) {
            *vi = mu * *vi + gi;
            *p -= lr * *vi;
        }
    }
    opt.step = (opt.step + 1).min(opt.total_steps);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Architecture, ClientModel};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ClientModel {
        let arch = Architecture { input_dim: 2, hidden: vec![], embedding_dim: 2, num_classes: 2, num_aux_heads: 0 };
        ClientModel::init(&arch, 0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    fn constant_grads(m: &ClientModel, g: f64) -> ModelGrads {
        ModelGrads { tensors: m.tensors().iter().map(|t| vec![g; t.len()]).collect() }
    }

    #[test]
    fn schedule_endpoints_and_monotonicity() {
        assert_eq!(cosine_lr(0.1, 0, 100), 0.1);
        assert_eq!(cosine_lr(0.1, 100, 100), 0.0);
        let lrs: Vec<f64> = (0..=100).map(|t| cosine_lr(0.1, t, 100)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn zero_momentum_is_plain_gradient_descent() {
        let mut m = tiny();
        let before: Vec<f64> = m.tensors().concat();
        let mut opt = OptState::new(&m, 0.5, 0.0, 10);
        let g = constant_grads(&m, 2.0);
        sgd_step(&mut m, &g, &mut opt).unwrap();
        for (a, b) in m.tensors().concat().iter().zip(&before) {
            assert_eq!(*a, b - 0.5 * 2.0);
        }
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn two_momentum_steps_match_unrolled_recurrence() {
        let mut m = tiny();
        let before: Vec<f64> = m.tensors().concat();
        let total = 10;
        let mut opt = OptState::new(&m, 0.1, 0.9, total);
        let g = 0.3;
        let grads = constant_grads(&m, g);
        sgd_step(&mut m, &grads, &mut opt).unwrap();
        sgd_step(&mut m, &grads, &mut opt).unwrap();
        // v1 = g, v2 = 0.9 g + g = 1.9 g
        let expected = cosine_lr(0.1, 0, total) * g + cosine_lr(0.1, 1, total) * 1.9 * g;
        for (a, b) in m.tensors().concat().iter().zip(&before) {
            assert!(((b - a) - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn no_update_once_schedule_is_exhausted() {
        let mut m = tiny();
        let before = m.clone();
        let mut opt = OptState::new(&m, 0.1, 0.9, 3);
        opt.step = 3;
        let g = constant_grads(&m, 1.0);
        sgd_step(&mut m, &g, &mut opt).unwrap();
        assert_eq!(m, before);
    }
}
