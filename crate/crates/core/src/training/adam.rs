//! Adam with bias-corrected moments.

use crate::error::{shape_err, Result};
use crate::nn::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    /// One update of every trainable entry; `grads[i]` belongs to the i-th
    /// store entry and `None` counts as a zero gradient.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(shape_err(format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        if self.m.is_empty() {
            self.m = store.iter().map(|p| vec![T::zero(); p.value.numel()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::one() - T::lit(self.beta1.powi(self.step as i32));
        let c2 = T::one() - T::lit(self.beta2.powi(self.step as i32));
        let (lr, eps) = (T::lit(self.lr), T::lit(self.eps));
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let g = grads[i].as_ref();
            if let Some(g) = g {
                if g.shape() != p.value.shape() {
                    return Err(shape_err(format!("gradient {:?} for `{}` {:?}", g.shape(), p.name, p.value.shape())));
                }
            }
            for (k, w) in p.value.data_mut().iter_mut().enumerate() {
                let gk = g.map_or(T::zero(), |g| g.data()[k]);
                m[k] = b1 * m[k] + (T::one() - b1) * gk;
                v[k] = b2 * v[k] + (T::one() - b2) * gk * gk;
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                *w = *w - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
