//! AdamW with decoupled weight decay.

use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.8,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// First and second moment estimates for one [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update with learning rate `lr`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) {
        assert_eq!(grads.len(), params.len(), "gradient count mismatch");
        self.step += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((( _, p), g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * p[i]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new([2], vec![1.0, -1.0]));
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(cfg, &store);
        opt.step(&mut store, &[Tensor::new([2], vec![3.0, -0.5])], 0.1);
        let p = store.tensors()[0].data();
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new([3], vec![4.0, -2.0, 0.5]));
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        for _ in 0..2000 {
            let g: Vec<f64> = store.tensors()[0].data().iter().map(|x| 2.0 * x).collect();
            opt.step(&mut store, &[Tensor::new([3], g)], 0.01);
        }
        assert!(store.tensors()[0].norm() < 1e-2);
    }
}
