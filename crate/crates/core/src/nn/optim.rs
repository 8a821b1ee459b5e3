//! Adam and global gradient-norm clipping.

use super::layers::{Layer, Param};
use super::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every trainable parameter from its accumulated gradient.
    pub fn step<T: Scalar>(&mut self, net: &mut dyn Layer<T>) {
        self.step += 1;
        let t = self.step as i32;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let mut slot = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        net.visit_mut("", &mut |_, p: &mut Param<T>| {
            if !p.trainable {
                return;
            }
            if ms.len() == slot {
                ms.push(vec![0.0; p.value.len()]);
                vs.push(vec![0.0; p.value.len()]);
            }
            let (m, v) = (&mut ms[slot], &mut vs[slot]);
            for i in 0..p.value.len() {
                let g = p.grad.data[i].f64();
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let upd = c.learning_rate * (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
                p.value.data[i] = T::of(p.value.data[i].f64() - upd);
            }
            slot += 1;
        });
    }
}

pub fn zero_grad<T: Scalar>(net: &mut dyn Layer<T>) {
    net.visit_mut("", &mut |_, p: &mut Param<T>| p.grad.fill(T::zero()));
}

pub fn grad_norm<T: Scalar>(net: &dyn Layer<T>) -> f64 {
    let mut sq = 0.0;
    net.visit("", &mut |_, p: &Param<T>| {
        if p.trainable {
            sq += p.grad.sum_sq();
        }
    });
    sq.sqrt()
}

/// Rescales all trainable gradients so their joint L2 norm is at most
/// `max_norm`; returns the norm before clipping. Gradients already within the
/// bound are left untouched.
pub fn clip_grad_norm<T: Scalar>(net: &mut dyn Layer<T>, max_norm: f64) -> f64 {
    let norm = grad_norm(net);
    if norm > max_norm {
        // The small margin keeps the rescaled norm under the bound after
        // rounding to the storage precision.
        let scale = T::of(max_norm / (norm + 1e-6));
        net.visit_mut("", &mut |_, p: &mut Param<T>| {
            if p.trainable {
                p.grad.data.iter_mut().for_each(|g| *g *= scale);
            }
        });
    }
    norm
}
