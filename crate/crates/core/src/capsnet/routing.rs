//! Capsule layer with dynamic routing-by-agreement.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::params::{glorot_uniform, Bound, ParamId, ParamStore};
use crate::nn::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Transformation matrices from primary capsules to class capsules.
#[derive(Debug, Clone)]
pub struct CapsLayer {
    /// `[n_primary, n_classes, caps_dim, in_dim]`.
    pub w: ParamId,
    pub n_primary: usize,
    pub n_classes: usize,
    pub caps_dim: usize,
    pub in_dim: usize,
    pub routing_iters: usize,
}

/// Output of one routed forward pass, with the routing trajectory.
pub struct Routed<T> {
    /// Class capsule activity vectors `[B, n_classes, caps_dim]`.
    pub v: Var,
    /// Coupling coefficients used at each iteration, `[B, I, J]`.
    pub couplings: Vec<Tensor<T>>,
    /// Routing logits at the start of each iteration, `[B, I, J]`.
    pub logits: Vec<Tensor<T>>,
}

pub fn check_caps_config(caps_dim: usize, routing_iters: usize) -> Result<()> {
    if caps_dim < 2 {
        return Err(Error::Config(format!("caps_dim must be at least 2, got {caps_dim}")));
    }
    if routing_iters < 1 {
        return Err(Error::Config("routing_iters must be at least 1".into()));
    }
    Ok(())
}

impl CapsLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        n_primary: usize,
        in_dim: usize,
        n_classes: usize,
        caps_dim: usize,
        routing_iters: usize,
        rng: &mut R,
    ) -> Result<Self> {
        check_caps_config(caps_dim, routing_iters)?;
        let w = glorot_uniform(&[n_primary, n_classes, caps_dim, in_dim], in_dim, caps_dim, rng);
        let w = store.add(format!("{name}.w"), w, true);
        Ok(Self { w, n_primary, n_classes, caps_dim, in_dim, routing_iters })
    }

    /// Routes squashed primary capsules `u: [B, I, in_dim]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, u: Var) -> Result<Routed<T>> {
        route(g, u, p.var(self.w), self.routing_iters)
    }
}

/// Predictions `û = W·u`, then `iters` rounds of routing-by-agreement.
///
/// Logits start at zero for every call. The agreement update is skipped
/// after the final round, and gradients flow through every round.
pub fn route<T: Scalar>(g: &mut Graph<T>, u: Var, w: Var, iters: usize) -> Result<Routed<T>> {
    let uhat = g.caps_predict(u, w)?;
    route_predictions(g, uhat, iters)
}

/// Routing over precomputed predictions `û: [B, I, J, D]`.
pub fn route_predictions<T: Scalar>(g: &mut Graph<T>, uhat: Var, iters: usize) -> Result<Routed<T>> {
    if iters < 1 {
        return Err(Error::Config("routing_iters must be at least 1".into()));
    }
    let s = g.shape(uhat).to_vec();
    let mut b = g.constant(Tensor::zeros(&s[..3]));
    let mut couplings = Vec::with_capacity(iters);
    let mut logits = Vec::with_capacity(iters);
    let mut v = None;
    for r in 0..iters {
        logits.push(g.value(b).clone());
        let c = g.softmax(b);
        couplings.push(g.value(c).clone());
        let sj = g.routing_sum(c, uhat)?;
        let vj = g.squash(sj);
        if r + 1 < iters {
            let a = g.agreement(uhat, vj)?;
            b = g.add(b, a)?;
        }
        v = Some(vj);
    }
    Ok(Routed { v: v.expect("at least one iteration"), couplings, logits })
}

/// Squash applied to a plain vector.
pub fn squash_vec<T: Scalar>(s: &[T]) -> Vec<T> {
    let n = s.iter().map(|&x| x * x).sum::<T>().sqrt();
    let f = n / (T::one() + n * n);
    s.iter().map(|&x| x * f).collect()
}

/// Per-class activity-vector length, `[B, J, D] -> [B, J]`.
pub fn length_layer<T: Scalar>(g: &mut Graph<T>, caps: Var) -> Var {
    g.norm(caps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn squash_closed_forms() {
        assert_eq!(squash_vec(&[0.0f64, 0.0]), vec![0.0, 0.0]);
        assert!((norm(&squash_vec(&[0.6f64, 0.8])) - 0.5).abs() < 1e-15);
        let v = squash_vec(&[6.0f64, 8.0]);
        assert!((norm(&v) - 100.0 / 101.0).abs() < 1e-12);
        assert!((v[0] / v[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn single_primary_capsule_is_squashed_prediction() {
        let mut g = Graph::<f64>::new();
        let u = g.constant(Tensor::from_f64(&[1, 1, 2], &[0.3, -0.4]).unwrap());
        let w = g.constant(Tensor::from_f64(&[1, 1, 2, 2], &[1.0, 2.0, 0.5, -1.0]).unwrap());
        let uhat = [1.0 * 0.3 + 2.0 * -0.4, 0.5 * 0.3 - 1.0 * -0.4];
        for iters in [1, 3, 5] {
            let r = route(&mut g, u, w, iters).unwrap();
            assert_eq!(g.value(r.v).data(), &squash_vec(&uhat)[..]);
            assert!(r.couplings.iter().all(|c| c.data() == [1.0f64]));
        }
    }

    #[test]
    fn single_primary_splits_evenly_on_first_pass() {
        let mut g = Graph::<f64>::new();
        let u = g.constant(Tensor::from_f64(&[1, 1, 2], &[0.3, -0.4]).unwrap());
        let w = g.constant(Tensor::from_f64(&[1, 2, 2, 2], &[1.0, 2.0, 0.5, -1.0, 0.0, 3.0, 1.5, 0.25]).unwrap());
        let r = route(&mut g, u, w, 1).unwrap();
        let uhat0 = [0.5 * (1.0 * 0.3 + 2.0 * -0.4), 0.5 * (0.5 * 0.3 - 1.0 * -0.4)];
        let uhat1 = [0.5 * (3.0 * -0.4), 0.5 * (1.5 * 0.3 + 0.25 * -0.4)];
        let want: Vec<f64> = squash_vec(&uhat0).into_iter().chain(squash_vec(&uhat1)).collect();
        assert_eq!(g.value(r.v).data(), &want[..]);
    }

    #[test]
    fn one_iteration_uses_uniform_couplings() {
        let mut g = Graph::<f64>::new();
        let uhat = g.constant(Tensor::from_f64(&[1, 2, 2, 2], &[1.0, 0.0, 0.0, 1.0, 3.0, 0.0, 0.0, -1.0]).unwrap());
        let r = route_predictions(&mut g, uhat, 1).unwrap();
        let v = g.value(r.v).data();
        let s0 = squash_vec(&[2.0, 0.0]);
        let s1 = squash_vec(&[0.0, 0.0]);
        assert_eq!(&v[..2], &s0[..]);
        assert_eq!(&v[2..], &s1[..]);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(check_caps_config(1, 3).is_err());
        assert!(check_caps_config(16, 0).is_err());
    }
}
