use alloc::vec::Vec;

use super::{Param, Parameters};
use crate::math::{powi, sqrt};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// Adam with decoupled weight decay. Moment buffers are keyed by the
/// parameter visitation order of the module passed to [`AdamW::step`], so
/// one optimizer instance must always be stepped with the same module.
#[derive(Debug, Clone)]
pub struct AdamW {
    config: AdamWConfig,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
    steps: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, moments: Vec::new(), steps: 0 }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update at learning rate `lr` (the caller applies any decay).
    pub fn step(&mut self, module: &mut dyn Parameters, lr: f64) {
        self.steps += 1;
        let c = self.config;
        let bc1 = 1.0 - powi(c.beta1, self.steps as i32);
        let bc2 = 1.0 - powi(c.beta2, self.steps as i32);
        let moments = &mut self.moments;
        let mut idx = 0;
        module.visit_mut(&mut |p: &mut Param| {
            if moments.len() <= idx {
                moments.push((alloc::vec![0.0; p.len()], alloc::vec![0.0; p.len()]));
            }
            let (m, v) = &mut moments[idx];
            assert_eq!(m.len(), p.len(), "optimizer stepped with a different module");
            for i in 0..p.len() {
                let g = p.grad[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let update = (m[i] / bc1) / (sqrt(v[i] / bc2) + c.eps);
                p.value[i] -= lr * (update + c.weight_decay * p.value[i]);
            }
            idx += 1;
        });
    }
}

/// Multiply the learning rate by `gamma` every `interval` epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDecay {
    pub base_lr: f64,
    pub gamma: f64,
    pub interval: usize,
}

impl StepDecay {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.interval == 0 {
            return self.base_lr;
        }
        self.base_lr * powi(self.gamma, (epoch / self.interval) as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;

    #[test]
    fn step_decay_every_interval() {
        let s = StepDecay { base_lr: 1e-4, gamma: 0.1, interval: 30 };
        assert_eq!(s.lr_at(0), 1e-4);
        assert_eq!(s.lr_at(29), 1e-4);
        assert!((s.lr_at(30) - 1e-5).abs() < 1e-18);
        assert!((s.lr_at(95) - 1e-7).abs() < 1e-20);
    }

    #[test]
    fn descends_a_quadratic() {
        let mut lin = Linear::from_weights(1, 1, alloc::vec![3.0], alloc::vec![-2.0]);
        let mut opt = AdamW::new(AdamWConfig { lr: 0.05, weight_decay: 0.0, ..Default::default() });
        for _ in 0..500 {
            crate::nn::zero_grad(&mut lin);
            lin.weight.grad[0] = 2.0 * lin.weight.value[0];
            lin.bias.grad[0] = 2.0 * lin.bias.value[0];
            opt.step(&mut lin, 0.05);
        }
        assert!(lin.weight.value[0].abs() < 1e-2);
        assert!(lin.bias.value[0].abs() < 1e-2);
    }
}
