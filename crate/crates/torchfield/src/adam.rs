//! Bias-corrected Adam.

use crate::error::{Error, Result};
use crate::tensor::Arr;

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Arr>,
    pub v: Vec<Arr>,
    pub t: u64,
}

impl Adam {
    pub fn new(param_shapes: &[Vec<usize>]) -> Adam {
        let zeros = |shapes: &[Vec<usize>]| {
            shapes
                .iter()
                .map(|s| Arr::zeros(ndarray::IxDyn(s)))
                .collect::<Vec<_>>()
        };
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros(param_shapes),
            v: zeros(param_shapes),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [&mut Arr], grads: &[Arr], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} parameters, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "parameter {:?} vs gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            ndarray::Zip::from(&mut **p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
                });
        }
        Ok(())
    }
}

/// `lr * (lr_final/lr)^(iter/total)`: exponential decay hitting `lr_final`
/// at the last iteration.
pub fn decayed_lr(lr: f64, lr_final: f64, iter: u64, total: u64) -> f64 {
    if total == 0 {
        return lr;
    }
    lr * (lr_final / lr).powf(iter as f64 / total as f64)
}
