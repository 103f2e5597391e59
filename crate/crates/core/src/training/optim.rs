use super::{OptimizerKind, TrainConfig};
use crate::numeric::Tensor;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Adam or plain SGD with optional global-norm gradient clipping.
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    clip: Option<f64>,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig, params: &[Tensor<f32>]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            kind: cfg.optimizer,
            lr: cfg.learning_rate,
            clip: cfg.grad_clip,
            t: 0,
            m: if cfg.optimizer == OptimizerKind::Adam { zeros() } else { Vec::new() },
            v: if cfg.optimizer == OptimizerKind::Adam { zeros() } else { Vec::new() },
        }
    }

    /// Global L2 norm of the gradient before clipping.
    pub fn step(&mut self, params: &mut [Tensor<f32>], grads: &mut [Tensor<f32>]) -> f64 {
        let norm = grads.iter().map(Tensor::sum_sq).sum::<f64>().sqrt();
        if let Some(c) = self.clip {
            if norm > c {
                let s = (c / norm) as f32;
                for g in grads.iter_mut() {
                    g.data_mut().iter_mut().for_each(|x| *x *= s);
                }
            }
        }
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads.iter()) {
                    for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w = (*w as f64 - self.lr * *d as f64) as f32;
                    }
                }
            }
            OptimizerKind::Adam => {
                let bc1 = 1.0 - BETA1.powi(self.t);
                let bc2 = 1.0 - BETA2.powi(self.t);
                for (i, (p, g)) in params.iter_mut().zip(grads.iter()).enumerate() {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for (j, (w, d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        let d = *d as f64;
                        let mj = BETA1 * m[j] as f64 + (1.0 - BETA1) * d;
                        let vj = BETA2 * v[j] as f64 + (1.0 - BETA2) * d * d;
                        m[j] = mj as f32;
                        v[j] = vj as f32;
                        let update = self.lr * (mj / bc1) / ((vj / bc2).sqrt() + EPS);
                        *w = (*w as f64 - update) as f32;
                    }
                }
            }
        }
        norm
    }
}
