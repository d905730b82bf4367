//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::model::Decoder;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Optimizer state for one parameter list.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, sizes: &[usize]) -> Self {
        Self {
            cfg,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_decoder(cfg: AdamWConfig, model: &Decoder) -> Self {
        let sizes: Vec<usize> = model.named_params().iter().map(|(_, m)| m.data().len()).collect();
        Self::new(cfg, &sizes)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update over flat parameter slices, `lr` overriding the configured
    /// rate (for schedules).
    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "parameter list length changed");
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * p[j]);
            }
        }
    }

    pub fn step_decoder(&mut self, model: &mut Decoder, grads: &Decoder, lr: f64) {
        let g: Vec<&[f64]> = grads.named_params().into_iter().map(|(_, m)| m.data()).collect();
        let mut p: Vec<&mut [f64]> = model.params_mut().into_iter().map(Matrix::data_mut).collect();
        self.update(&mut p, &g, lr);
    }
}
