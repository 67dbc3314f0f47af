use serde::{Deserialize, Serialize};

use super::net::Network;
use super::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction; moment buffers follow the network's parameter
/// visiting order.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    config: AdamConfig,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    steps: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update with learning rate `lr` and clears the gradients.
    pub fn step<N: Network<T> + ?Sized>(&mut self, net: &mut N, lr: f64) {
        self.steps += 1;
        let t = self.steps as i32;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let step_size = T::of(lr / c1);
        let c2_sqrt = T::of(c2.sqrt());
        let (b1, b2) = (T::of(beta1), T::of(beta2));
        let (ob1, ob2) = (T::of(1.0 - beta1), T::of(1.0 - beta2));
        let eps = T::of(eps);
        let first = &mut self.first;
        let second = &mut self.second;
        let mut idx = 0;
        net.visit_params(&mut |p| {
            if first.len() <= idx {
                first.push(vec![T::zero(); p.len()]);
                second.push(vec![T::zero(); p.len()]);
            }
            let m = &mut first[idx];
            let v = &mut second[idx];
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + ob1 * g;
                v[i] = b2 * v[i] + ob2 * g * g;
                let denom = v[i].sqrt() / c2_sqrt + eps;
                p.value[i] = p.value[i] - step_size * m[i] / denom;
                p.grad[i] = T::zero();
            }
            idx += 1;
        });
        net.record_update();
    }
}
