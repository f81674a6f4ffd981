//! Reconstruction decoder used as a regularizer on the capsule layer.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::nn::layers::Dense;
use crate::nn::params::{Bound, ParamStore};
use crate::nn::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DECODER_HIDDEN: [usize; 2] = [512, 1024];

/// Fully connected decoder from masked class capsules to the flattened,
/// min-max scaled feature matrix.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub layers: [Dense; 3],
    pub n_classes: usize,
    pub caps_dim: usize,
    pub output: usize,
}

pub struct Reconstruction {
    pub output: Var,
    pub loss: Var,
}

impl Decoder {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        n_classes: usize,
        caps_dim: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        Self::with_hidden(store, name, n_classes, caps_dim, output, DECODER_HIDDEN, rng)
    }

    pub fn with_hidden<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        n_classes: usize,
        caps_dim: usize,
        output: usize,
        hidden: [usize; 2],
        rng: &mut R,
    ) -> Self {
        let input = n_classes * caps_dim;
        let layers = [
            Dense::new(store, &format!("{name}.fc1"), input, hidden[0], rng),
            Dense::new(store, &format!("{name}.fc2"), hidden[0], hidden[1], rng),
            Dense::new(store, &format!("{name}.fc3"), hidden[1], output, rng),
        ];
        Self { layers, n_classes, caps_dim, output }
    }

    /// Masks non-target capsules, decodes, and scores against `target`
    /// (`[B, output]`) by mean absolute error.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        caps: Var,
        targets: &Tensor<T>,
        target: &Tensor<T>,
    ) -> Result<Reconstruction> {
        let s = g.shape(caps).to_vec();
        if s.len() != 3 || s[1] != self.n_classes || s[2] != self.caps_dim || targets.shape() != [s[0], s[1]] {
            return Err(shape_err(format!("decoder capsules {s:?} with targets {:?}", targets.shape())));
        }
        if target.shape() != [s[0], self.output] {
            return Err(shape_err(format!(
                "reconstruction target {:?}, expected [{}, {}]",
                target.shape(),
                s[0],
                self.output
            )));
        }
        let d = self.caps_dim;
        let mask: Vec<T> = targets.data().iter().flat_map(|&t| std::iter::repeat_n(t, d)).collect();
        let mask = g.constant(Tensor::new(&s, mask)?);
        let masked = g.mul(caps, mask)?;
        let mut h = g.reshape(masked, &[s[0], self.n_classes * d])?;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, p, h)?;
            h = if i < 2 { g.relu(h) } else { g.sigmoid(h) };
        }
        let t = g.constant(target.clone());
        let diff = g.sub(h, t)?;
        let diff = g.abs(diff);
        let loss = g.mean(diff);
        Ok(Reconstruction { output: h, loss })
    }
}

/// Mean absolute error between two equally shaped tensors.
pub fn mean_absolute_error<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> T {
    let n = T::lit(a.numel() as f64);
    a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y).abs()).sum::<T>() / n
}
