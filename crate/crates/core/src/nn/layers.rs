//! Non-capsule layers built on [`Graph`] primitives.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::nn::graph::{BnMode, Graph, Var};
use crate::nn::params::{glorot_uniform, Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Fully connected layer `y = x·W + b` on `[N, in]` inputs.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Dense {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.w"), glorot_uniform(&[input, output], input, output, rng), true);
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[output]), true);
        Self { w, b, input, output }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = g.matmul(x, p.var(self.w))?;
        g.add(h, p.var(self.b))
    }
}

/// Batch normalization over the last (feature) axis.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

/// Batch statistics produced by a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct BnUpdate<T> {
    mean: Vec<T>,
    var: Vec<T>,
    rows: usize,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dims: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dims], T::one()), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dims]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[dims]), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::full(&[dims], T::one()), false),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        store: &ParamStore<T>,
        x: Var,
        training: bool,
    ) -> Result<(Var, Option<BnUpdate<T>>)> {
        let eps = T::lit(self.eps);
        let (gamma, beta) = (p.var(self.gamma), p.var(self.beta));
        if training {
            let rows = g.value(x).numel() / g.value(x).last_dim().max(1);
            let (y, stats) = g.batch_norm(x, gamma, beta, BnMode::Batch { eps })?;
            let (mean, var) = stats.expect("batch statistics");
            Ok((y, Some(BnUpdate { mean, var, rows })))
        } else {
            let mode = BnMode::Running {
                mean: store.get(self.running_mean).data(),
                var: store.get(self.running_var).data(),
                eps,
            };
            Ok((g.batch_norm(x, gamma, beta, mode)?.0, None))
        }
    }

    /// Folds batch statistics into the running estimates (unbiased variance).
    pub fn update_running<T: Scalar>(&self, store: &mut ParamStore<T>, u: &BnUpdate<T>) {
        let m = T::lit(self.momentum);
        let keep = T::one() - m;
        let correction = T::lit(u.rows as f64 / (u.rows.max(2) - 1) as f64);
        for (r, &b) in store.get_mut(self.running_mean).data_mut().iter_mut().zip(&u.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in store.get_mut(self.running_var).data_mut().iter_mut().zip(&u.var) {
            *r = keep * *r + m * b * correction;
        }
    }
}

/// One recurrence direction of an LSTM layer.
#[derive(Debug, Clone)]
pub struct LstmDirection {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
}

impl LstmDirection {
    fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let g4 = 4 * hidden;
        let w_ih = store.add(format!("{name}.w_ih"), glorot_uniform(&[input, g4], input, g4, rng), true);
        let w_hh = store.add(format!("{name}.w_hh"), glorot_uniform(&[hidden, g4], hidden, g4, rng), true);
        let mut b = Tensor::<T>::zeros(&[g4]);
        b.data_mut()[hidden..2 * hidden].iter_mut().for_each(|v| *v = T::one());
        let bias = store.add(format!("{name}.bias"), b, true);
        Self { w_ih, w_hh, bias }
    }
}

/// Bidirectional LSTM: `[B, T, D] -> [B, T, 2H]`, forward states first.
#[derive(Debug, Clone)]
pub struct BiLstm {
    pub forward: LstmDirection,
    pub backward: LstmDirection,
    pub hidden: usize,
}

impl BiLstm {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            forward: LstmDirection::new(store, &format!("{name}.fwd"), input, hidden, rng),
            backward: LstmDirection::new(store, &format!("{name}.bwd"), input, hidden, rng),
            hidden,
        }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden
    }

    pub fn run<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let f = &self.forward;
        let b = &self.backward;
        let hf = g.lstm(x, p.var(f.w_ih), p.var(f.w_hh), p.var(f.bias), false)?;
        let hb = g.lstm(x, p.var(b.w_ih), p.var(b.w_hh), p.var(b.bias), true)?;
        g.concat(&[hf, hb], 2)
    }
}

/// Inverted dropout. Identity when not training or when `rate == 0`.
pub fn dropout<T: Scalar, R: Rng>(g: &mut Graph<T>, x: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let keep = T::lit(1.0 / (1.0 - rate));
    let shape = g.shape(x).to_vec();
    let n = shape.iter().product();
    let mask = (0..n).map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep }).collect();
    let mask = g.constant(Tensor::new(&shape, mask)?);
    g.mul(x, mask)
}

/// Additive attention pooling over time: `score_t = vᵀ tanh(W h_t)`.
#[derive(Debug, Clone)]
pub struct AttentionPool {
    pub proj: ParamId,
    pub score: ParamId,
}

impl AttentionPool {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, dim: usize, attn: usize, rng: &mut R) -> Self {
        Self {
            proj: store.add(format!("{name}.proj"), glorot_uniform(&[dim, attn], dim, attn, rng), true),
            score: store.add(format!("{name}.score"), glorot_uniform(&[attn, 1], attn, 1, rng), true),
        }
    }

    /// `h: [B, T, d] -> [B, d]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, h: Var) -> Result<Var> {
        attention_pool(g, h, p.var(self.proj), p.var(self.score))
    }
}

/// Attention pooling on raw vars; `proj: [d, a]`, `score: [a, 1]`.
pub fn attention_pool<T: Scalar>(g: &mut Graph<T>, h: Var, proj: Var, score: Var) -> Result<Var> {
    let s = g.shape(h).to_vec();
    if s.len() != 3 {
        return Err(shape_err(format!("attention_pool expects [B,T,d], got {s:?}")));
    }
    let (b, t, d) = (s[0], s[1], s[2]);
    let flat = g.reshape(h, &[b * t, d])?;
    let e = g.matmul(flat, proj)?;
    let e = g.tanh(e);
    let scores = g.matmul(e, score)?;
    let scores = g.reshape(scores, &[b, t])?;
    let alpha = g.softmax(scores);
    let alpha = g.reshape(alpha, &[b, t, 1])?;
    let h4 = g.reshape(h, &[b, t, 1, d])?;
    let pooled = g.routing_sum(alpha, h4)?;
    g.reshape(pooled, &[b, d])
}
