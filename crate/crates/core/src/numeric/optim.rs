use serde::{Deserialize, Serialize};

use crate::numeric::params::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Linear warmup length in steps.
    pub warmup_steps: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.98, eps: 1e-8, weight_decay: 0.0, warmup_steps: 50, clip_norm: Some(1.0) }
    }
}

/// Adam with linear warmup. Parameters with `requires_grad == false` are
/// never touched, so frozen values stay bit-identical.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let first = store.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
        let second = store.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
        Adam { config, step: 0, first, second }
    }

    pub fn learning_rate(&self, base: f64) -> f64 {
        let w = self.config.warmup_steps as f64;
        if w == 0.0 {
            base
        } else {
            base * ((self.step as f64) / w).min(1.0)
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, base_lr: f64) {
        self.step += 1;
        let lr = self.learning_rate(base_lr);
        let scale = match self.config.clip_norm {
            Some(max) => {
                let norm = store
                    .iter()
                    .filter(|(_, p)| p.requires_grad())
                    .flat_map(|(_, p)| p.grad().data().iter())
                    .map(|g| g * g)
                    .sum::<f64>()
                    .sqrt();
                if norm > max { max / norm } else { 1.0 }
            }
            None => 1.0,
        };
        let AdamConfig { beta1, beta2, eps, weight_decay, .. } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, p) in store.iter_mut().enumerate() {
            if !p.requires_grad() {
                continue;
            }
            let grad = p.grad().data().to_vec();
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            let value = p.value_mut().data_mut();
            for j in 0..value.len() {
                let gj = grad[j] * scale;
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
                value[j] -= lr * (update + weight_decay * value[j]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::params::{Owner, ParamRole};
    use crate::numeric::tensor::Tensor;
    use crate::numeric::Graph;

    #[test]
    fn minimizes_a_quadratic_and_skips_frozen() {
        let mut store = ParamStore::new();
        let x = store.register("x", Tensor::vector(vec![3.0, -2.0]).unwrap(), ParamRole::Other, Owner::Encoder).unwrap();
        let y = store.register("y", Tensor::vector(vec![5.0]).unwrap(), ParamRole::Other, Owner::Decoder).unwrap();
        store.set_requires_grad(y, false);
        let mut opt = Adam::new(&store, AdamConfig { warmup_steps: 0, clip_norm: None, ..Default::default() });
        for _ in 0..500 {
            store.zero_grad();
            let mut g = Graph::new();
            let xv = g.param(&store, x);
            let yv = g.param(&store, y);
            let sq = g.mul(xv, xv).unwrap();
            let s = g.sum(sq);
            let t = g.sum(yv);
            let l = g.add(s, t).unwrap();
            g.backward(l).unwrap();
            g.accumulate_param_grads(&mut store);
            opt.step(&mut store, 0.05);
        }
        assert!(store.get(x).value().data().iter().all(|v| v.abs() < 1e-2));
        assert_eq!(store.get(y).value().data(), &[5.0]);
    }
}
