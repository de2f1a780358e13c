use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{Real, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction over an ordered list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<R> {
    pub cfg: AdamConfig,
    pub t: u64,
    pub m: Vec<Tensor<R>>,
    pub v: Vec<Tensor<R>>,
}

impl<R: Real> Adam<R> {
    pub fn new<'a>(cfg: AdamConfig, params: impl IntoIterator<Item = &'a Tensor<R>>) -> Self {
        let m: Vec<Tensor<R>> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { cfg, t: 0, v: m.clone(), m }
    }

    /// Applies one update; `params` and `grads` must follow construction order.
    pub fn step(&mut self, params: &mut [&mut Tensor<R>], grads: &[Tensor<R>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape("optimizer parameter list", &[self.m.len()], &[params.len(), grads.len()]));
        }
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t.min(i32::MAX as u64) as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t.min(i32::MAX as u64) as i32);
        let (b1, b2) = (R::of(c.beta1), R::of(c.beta2));
        let (ob1, ob2) = (R::of(1.0 - c.beta1), R::of(1.0 - c.beta2));
        let step = R::of(c.learning_rate / bc1);
        let inv_bc2 = R::of(1.0 / bc2);
        let eps = R::of(c.eps);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.shape() != g.shape() {
                return Err(Error::shape("optimizer gradient", p.shape(), g.shape()));
            }
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mv = b1 * *mv + ob1 * gv;
                *vv = b2 * *vv + ob2 * gv * gv;
                *pv -= step * *mv / (Scalar::sqrt(*vv * inv_bc2) + eps);
            }
        }
        Ok(())
    }
}
