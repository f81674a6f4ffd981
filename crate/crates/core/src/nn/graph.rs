//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Operations are recorded in call order; [`Graph::backward`] walks the tape
//! once in reverse. Nodes whose inputs carry no gradient are recorded as
//! constants and skipped during the backward sweep.

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Smallest norm used as a denominator when differentiating through norms.
pub const NORM_GUARD: f64 = 1e-9;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Normalization statistics source for [`Graph::batch_norm`].
pub enum BnMode<'a, T> {
    /// Normalize with statistics of the current batch.
    Batch { eps: T },
    /// Normalize with stored running statistics.
    Running { mean: &'a [T], var: &'a [T], eps: T },
}

struct LstmCache<T> {
    /// Post-activation gates `[B, T, 4H]`, ordered i, f, g, o.
    gates: Vec<T>,
    /// Cell state `[B, T, H]`.
    cell: Vec<T>,
    /// `tanh(cell)` `[B, T, H]`.
    cell_tanh: Vec<T>,
    batch: usize,
    steps: usize,
    input: usize,
    hidden: usize,
    reverse: bool,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Shift(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Square(Var),
    Abs(Var),
    Sqrt(Var),
    Softmax(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SumAxis { input: Var, axis: usize },
    Norm(Var),
    Squash(Var),
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    Lstm { x: Var, w_ih: Var, w_hh: Var, bias: Var, cache: Box<LstmCache<T>> },
    CapsPredict { u: Var, w: Var },
    RoutingSum { c: Var, uhat: Var },
    Agreement { uhat: Var, v: Var },
    SoftmaxXent { logits: Var, probs: Vec<T>, targets: Tensor<T> },
    BceLogits { logits: Var, targets: Tensor<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Square(..) => "square",
            Op::Abs(..) => "abs",
            Op::Sqrt(..) => "sqrt",
            Op::Softmax(..) => "softmax",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(..) => "reshape",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAxis { .. } => "sum_axis",
            Op::Norm(..) => "norm",
            Op::Squash(..) => "squash",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Lstm { .. } => "lstm",
            Op::CapsPredict { .. } => "caps_predict",
            Op::RoutingSum { .. } => "routing_sum",
            Op::Agreement { .. } => "agreement",
            Op::SoftmaxXent { .. } => "softmax_cross_entropy",
            Op::BceLogits { .. } => "bce_with_logits",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A single-writer recording of one forward computation.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    fault: Option<&'static str>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn is_suffix(big: &[usize], small: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), fault: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// First operation that produced a non-finite value, if any.
    pub fn fault(&self) -> Option<&'static str> {
        self.fault
    }

    /// Returns `Err(NonFinite)` if any recorded value was NaN or infinite.
    pub fn check_finite(&self) -> Result<()> {
        match self.fault {
            Some(op) => Err(Error::NonFinite { op }),
            None => Ok(()),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        if self.fault.is_none() && !value.is_finite() {
            self.fault = Some(op.name());
        }
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a value that receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Records a leaf whose gradient is collected by [`Graph::backward`].
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).map(f);
        let ng = self.needs(x);
        self.push(value, op, ng)
    }

    /// `[m,k] · [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), ng))
    }

    fn broadcast_binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !is_suffix(ta.shape(), tb.shape()) {
            return Err(shape_err(format!(
                "{}: {:?} does not broadcast against {:?}",
                op.name(),
                tb.shape(),
                ta.shape()
            )));
        }
        let inner = tb.numel().max(1);
        let data: Vec<T> =
            ta.data().chunks(inner).flat_map(|row| row.iter().zip(tb.data()).map(|(&x, &y)| f(x, y))).collect();
        let value = Tensor::new(ta.shape(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, op, ng))
    }

    /// Elementwise sum; `b`'s shape must be a suffix of `a`'s.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        self.unary(x, |v| v * k, Op::Scale(x, k))
    }

    /// Adds a constant to every element.
    pub fn shift(&mut self, x: Var, k: T) -> Var {
        self.unary(x, |v| v + k, Op::Shift(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.sqrt(), Op::Sqrt(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let d = t.last_dim();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        let value = Tensor::new(t.shape(), out).expect("same shape");
        let ng = self.needs(x);
        self.push(value, Op::Softmax(x), ng)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*inputs.first().ok_or_else(|| shape_err("concat of nothing"))?).to_vec();
        if axis >= first.len() {
            return Err(shape_err(format!("concat axis {axis} for shape {first:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let same_rest =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same_rest {
                return Err(shape_err(format!("concat {s:?} with {first:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let n = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let ng = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(Tensor::new(&shape, out)?, Op::Concat { inputs: inputs.to_vec(), axis }, ng))
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(shape_err(format!("slice {start}..{} of axis {axis} in {s:?}", start + len)));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&data[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let ng = self.needs(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Slice { input: x, axis, start }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::Reshape(x), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let ng = self.needs(x);
        self.push(value, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / T::lit(t.numel() as f64));
        let ng = self.needs(x);
        self.push(value, Op::Mean(x), ng)
    }

    /// Sums out one axis.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(shape_err(format!("sum_axis {axis} of {s:?}")));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let data = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &data[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc = *acc + v;
                }
            }
        }
        let mut shape = s;
        shape.remove(axis);
        let ng = self.needs(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::SumAxis { input: x, axis }, ng))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self.shape(x).get(axis).ok_or_else(|| shape_err("mean_axis out of range"))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, T::one() / T::lit(n as f64)))
    }

    /// Euclidean norm over the last axis.
    pub fn norm(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let d = t.last_dim();
        let out: Vec<T> = t.data().chunks(d).map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt()).collect();
        let mut shape = t.shape().to_vec();
        shape.pop();
        let ng = self.needs(x);
        self.push(Tensor::new(&shape, out).expect("norm shape"), Op::Norm(x), ng)
    }

    /// Capsule squash over the last axis: `v = (|s|² / (1 + |s|²)) · s / |s|`.
    pub fn squash(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let d = t.last_dim();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(d) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            let f = n / (T::one() + n * n);
            row.iter_mut().for_each(|v| *v = *v * f);
        }
        let value = Tensor::new(t.shape(), out).expect("same shape");
        let ng = self.needs(x);
        self.push(value, Op::Squash(x), ng)
    }

    /// Normalizes each feature (last axis) over all leading axes, then applies
    /// `gamma`/`beta`. With [`BnMode::Batch`] the biased batch mean and
    /// variance are returned alongside the output.
    #[allow(clippy::type_complexity)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
    ) -> Result<(Var, Option<(Vec<T>, Vec<T>)>)> {
        let t = self.value(x);
        let d = t.last_dim();
        if t.ndim() < 2 || self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err(format!(
                "batch_norm input {:?} with gamma {:?}, beta {:?}",
                t.shape(),
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let rows = t.numel() / d;
        let data = t.data();
        let (mean, var, eps, batch_stats) = match mode {
            BnMode::Batch { eps } => {
                if rows < 2 {
                    return Err(Error::DegenerateBatch(format!("{rows} rows in training batch norm")));
                }
                let nr = T::lit(rows as f64);
                let mut mean = vec![T::zero(); d];
                for row in data.chunks(d) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m = *m + v;
                    }
                }
                mean.iter_mut().for_each(|m| *m = *m / nr);
                let mut var = vec![T::zero(); d];
                for row in data.chunks(d) {
                    for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                        *s = *s + (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s = *s / nr);
                (mean, var, eps, true)
            }
            BnMode::Running { mean, var, eps } => {
                if mean.len() != d || var.len() != d {
                    return Err(shape_err("running statistics length"));
                }
                (mean.to_vec(), var.to_vec(), eps, false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(data.len());
        let mut out = Vec::with_capacity(data.len());
        for row in data.chunks(d) {
            for k in 0..d {
                let h = (row[k] - mean[k]) * inv_std[k];
                xhat.push(h);
                out.push(g[k] * h + b[k]);
            }
        }
        let value = Tensor::new(t.shape(), out)?;
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let op = Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats };
        let y = self.push(value, op, ng);
        Ok((y, batch_stats.then_some((mean, var))))
    }

    /// Single-direction LSTM over `x: [B, T, D]` with gate order i, f, g, o.
    /// `w_ih: [D, 4H]`, `w_hh: [H, 4H]`, `bias: [4H]`. The output `[B, T, H]`
    /// holds the hidden state at each input position; `reverse` runs the
    /// recurrence from the last frame to the first.
    pub fn lstm(&mut self, x: Var, w_ih: Var, w_hh: Var, bias: Var, reverse: bool) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(shape_err(format!("lstm input must be [B,T,D], got {xs:?}")));
        }
        let (batch, steps, input) = (xs[0], xs[1], xs[2]);
        if steps == 0 {
            return Err(Error::InputTooShort("zero-length sequence".into()));
        }
        let hs = self.shape(w_hh).to_vec();
        if hs.len() != 2 || hs[1] != 4 * hs[0] {
            return Err(shape_err(format!("lstm w_hh must be [H,4H], got {hs:?}")));
        }
        let hidden = hs[0];
        let g4 = 4 * hidden;
        if self.shape(w_ih) != [input, g4] || self.shape(bias) != [g4] {
            return Err(shape_err(format!(
                "lstm w_ih {:?} / bias {:?} inconsistent with input {input}, hidden {hidden}",
                self.shape(w_ih),
                self.shape(bias)
            )));
        }
        // Input projections for every frame at once.
        let mut zx = vec![T::zero(); batch * steps * g4];
        T::gemm(batch * steps, input, g4, self.value(x).data(), false, self.value(w_ih).data(), false, &mut zx, false);
        let b = self.value(bias).data();
        for row in zx.chunks_mut(g4) {
            for (z, &bb) in row.iter_mut().zip(b) {
                *z = *z + bb;
            }
        }
        let whh = self.value(w_hh).data();
        let mut gates = vec![T::zero(); batch * steps * g4];
        let mut cell = vec![T::zero(); batch * steps * hidden];
        let mut cell_tanh = vec![T::zero(); batch * steps * hidden];
        let mut out = vec![T::zero(); batch * steps * hidden];
        let mut h_prev = vec![T::zero(); batch * hidden];
        let mut c_prev = vec![T::zero(); batch * hidden];
        let mut z = vec![T::zero(); batch * g4];
        for s in 0..steps {
            let t = if reverse { steps - 1 - s } else { s };
            T::gemm(batch, hidden, g4, &h_prev, false, whh, false, &mut z, false);
            for bi in 0..batch {
                let zrow = &mut z[bi * g4..(bi + 1) * g4];
                let xrow = &zx[(bi * steps + t) * g4..(bi * steps + t + 1) * g4];
                for (a, &v) in zrow.iter_mut().zip(xrow) {
                    *a = *a + v;
                }
                let grow = &mut gates[(bi * steps + t) * g4..(bi * steps + t + 1) * g4];
                for k in 0..hidden {
                    let i = sigmoid(zrow[k]);
                    let f = sigmoid(zrow[hidden + k]);
                    let g = zrow[2 * hidden + k].tanh();
                    let o = sigmoid(zrow[3 * hidden + k]);
                    grow[k] = i;
                    grow[hidden + k] = f;
                    grow[2 * hidden + k] = g;
                    grow[3 * hidden + k] = o;
                    let c = f * c_prev[bi * hidden + k] + i * g;
                    let ct = c.tanh();
                    let h = o * ct;
                    let at = (bi * steps + t) * hidden + k;
                    cell[at] = c;
                    cell_tanh[at] = ct;
                    out[at] = h;
                    c_prev[bi * hidden + k] = c;
                    h_prev[bi * hidden + k] = h;
                }
            }
        }
        let value = Tensor::new(&[batch, steps, hidden], out)?;
        let cache = Box::new(LstmCache { gates, cell, cell_tanh, batch, steps, input, hidden, reverse });
        let ng = [x, w_ih, w_hh, bias].iter().any(|&v| self.needs(v));
        Ok(self.push(value, Op::Lstm { x, w_ih, w_hh, bias, cache }, ng))
    }

    /// Capsule predictions `û[b,i,j] = W[i,j] · u[b,i]` for
    /// `u: [B, I, Din]` and `W: [I, J, Dc, Din]`, giving `[B, I, J, Dc]`.
    pub fn caps_predict(&mut self, u: Var, w: Var) -> Result<Var> {
        let (us, ws) = (self.shape(u).to_vec(), self.shape(w).to_vec());
        if us.len() != 3 || ws.len() != 4 || us[1] != ws[0] || us[2] != ws[3] {
            return Err(shape_err(format!("caps_predict u {us:?} with W {ws:?}")));
        }
        let (batch, prim, din) = (us[0], us[1], us[2]);
        let (classes, dc) = (ws[1], ws[2]);
        let jd = classes * dc;
        let (ud, wd) = (self.value(u).data(), self.value(w).data());
        let mut out = vec![T::zero(); batch * prim * jd];
        let mut ui = vec![T::zero(); batch * din];
        let mut oi = vec![T::zero(); batch * jd];
        for i in 0..prim {
            for b in 0..batch {
                ui[b * din..(b + 1) * din].copy_from_slice(&ud[(b * prim + i) * din..(b * prim + i + 1) * din]);
            }
            T::gemm(batch, din, jd, &ui, false, &wd[i * jd * din..(i + 1) * jd * din], true, &mut oi, false);
            for b in 0..batch {
                out[(b * prim + i) * jd..(b * prim + i + 1) * jd].copy_from_slice(&oi[b * jd..(b + 1) * jd]);
            }
        }
        let value = Tensor::new(&[batch, prim, classes, dc], out)?;
        let ng = self.needs(u) || self.needs(w);
        Ok(self.push(value, Op::CapsPredict { u, w }, ng))
    }

    /// `s[b,j] = Σ_i c[b,i,j] · û[b,i,j]` for `c: [B,I,J]`, `û: [B,I,J,D]`.
    pub fn routing_sum(&mut self, c: Var, uhat: Var) -> Result<Var> {
        let (cs, us) = (self.shape(c).to_vec(), self.shape(uhat).to_vec());
        if us.len() != 4 || cs != us[..3] {
            return Err(shape_err(format!("routing_sum c {cs:?} with û {us:?}")));
        }
        let (batch, prim, classes, d) = (us[0], us[1], us[2], us[3]);
        let (cd, ud) = (self.value(c).data(), self.value(uhat).data());
        let mut out = vec![T::zero(); batch * classes * d];
        for b in 0..batch {
            for i in 0..prim {
                for j in 0..classes {
                    let w = cd[(b * prim + i) * classes + j];
                    let src = &ud[((b * prim + i) * classes + j) * d..][..d];
                    let dst = &mut out[(b * classes + j) * d..][..d];
                    for (o, &v) in dst.iter_mut().zip(src) {
                        *o = *o + w * v;
                    }
                }
            }
        }
        let value = Tensor::new(&[batch, classes, d], out)?;
        let ng = self.needs(c) || self.needs(uhat);
        Ok(self.push(value, Op::RoutingSum { c, uhat }, ng))
    }

    /// `a[b,i,j] = û[b,i,j] · v[b,j]` for `û: [B,I,J,D]`, `v: [B,J,D]`.
    pub fn agreement(&mut self, uhat: Var, v: Var) -> Result<Var> {
        let (us, vs) = (self.shape(uhat).to_vec(), self.shape(v).to_vec());
        if us.len() != 4 || vs.len() != 3 || vs[0] != us[0] || vs[1..] != us[2..] {
            return Err(shape_err(format!("agreement û {us:?} with v {vs:?}")));
        }
        let (batch, prim, classes, d) = (us[0], us[1], us[2], us[3]);
        let (ud, vd) = (self.value(uhat).data(), self.value(v).data());
        let mut out = vec![T::zero(); batch * prim * classes];
        for b in 0..batch {
            for i in 0..prim {
                for j in 0..classes {
                    let a = &ud[((b * prim + i) * classes + j) * d..][..d];
                    let vv = &vd[(b * classes + j) * d..][..d];
                    out[(b * prim + i) * classes + j] = a.iter().zip(vv).map(|(&x, &y)| x * y).sum();
                }
            }
        }
        let value = Tensor::new(&[batch, prim, classes], out)?;
        let ng = self.needs(uhat) || self.needs(v);
        Ok(self.push(value, Op::Agreement { uhat, v }, ng))
    }

    /// Mean over the batch of `-Σ_k t_k log softmax(z)_k` for `logits: [B,K]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let z = self.value(logits);
        if z.ndim() != 2 || z.shape() != targets.shape() {
            return Err(shape_err(format!("cross entropy logits {:?} targets {:?}", z.shape(), targets.shape())));
        }
        let k = z.last_dim();
        let rows = z.numel() / k;
        let mut probs = z.data().to_vec();
        let mut loss = T::zero();
        for (r, row) in probs.chunks_mut(k).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            for (c, p) in row.iter_mut().enumerate() {
                let logp = *p - lse;
                loss = loss - targets.data()[r * k + c] * logp;
                *p = logp.exp();
            }
        }
        let value = Tensor::scalar(loss / T::lit(rows as f64));
        let ng = self.needs(logits);
        Ok(self.push(value, Op::SoftmaxXent { logits, probs, targets: targets.clone() }, ng))
    }

    /// Binary cross-entropy on logits, averaged over every element.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let z = self.value(logits);
        if z.shape() != targets.shape() {
            return Err(shape_err(format!("bce logits {:?} targets {:?}", z.shape(), targets.shape())));
        }
        let loss: T = z
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &t)| x.max(T::zero()) - x * t + (T::one() + (-x.abs()).exp()).ln())
            .sum();
        let value = Tensor::scalar(loss / T::lit(z.numel() as f64));
        let ng = self.needs(logits);
        Ok(self.push(value, Op::BceLogits { logits, targets: targets.clone() }, ng))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err(format!("backward from non-scalar {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<T>, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.needs(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g.data(), false, tb.data(), true, &mut ga, false);
                    accumulate(grads, *a, Tensor::new(&[m, k], ga).unwrap());
                }
                if self.needs(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(k, m, n, ta.data(), true, g.data(), false, &mut gb, false);
                    accumulate(grads, *b, Tensor::new(&[k, n], gb).unwrap());
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                if self.needs(*b) {
                    let tb = self.value(*b);
                    let inner = tb.numel().max(1);
                    let mut gb = vec![T::zero(); inner];
                    for row in g.data().chunks(inner) {
                        for (acc, &v) in gb.iter_mut().zip(row) {
                            *acc = *acc + sign * v;
                        }
                    }
                    accumulate(grads, *b, Tensor::new(tb.shape(), gb).unwrap());
                }
                if self.needs(*a) {
                    accumulate(grads, *a, g);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let inner = tb.numel().max(1);
                if self.needs(*b) {
                    let mut gb = vec![T::zero(); inner];
                    for (grow, arow) in g.data().chunks(inner).zip(ta.data().chunks(inner)) {
                        for ((acc, &gv), &av) in gb.iter_mut().zip(grow).zip(arow) {
                            *acc = *acc + gv * av;
                        }
                    }
                    accumulate(grads, *b, Tensor::new(tb.shape(), gb).unwrap());
                }
                if self.needs(*a) {
                    let ga: Vec<T> = g
                        .data()
                        .chunks(inner)
                        .flat_map(|row| row.iter().zip(tb.data()).map(|(&gv, &bv)| gv * bv))
                        .collect();
                    accumulate(grads, *a, Tensor::new(ta.shape(), ga).unwrap());
                }
            }
            Op::Scale(x, k) => accumulate(grads, *x, g.map(|v| v * *k)),
            Op::Shift(x) => accumulate(grads, *x, g),
            Op::Sigmoid(x) => accumulate(grads, *x, g.zip_map(y, |gv, s| gv * s * (T::one() - s))),
            Op::Tanh(x) => accumulate(grads, *x, g.zip_map(y, |gv, t| gv * (T::one() - t * t))),
            Op::Relu(x) => {
                let gx = g.zip_map(self.value(*x), |gv, xv| if xv > T::zero() { gv } else { T::zero() });
                accumulate(grads, *x, gx)
            }
            Op::Square(x) => {
                let two = T::lit(2.0);
                accumulate(grads, *x, g.zip_map(self.value(*x), |gv, xv| gv * two * xv))
            }
            Op::Abs(x) => accumulate(grads, *x, g.zip_map(self.value(*x), |gv, xv| gv * xv.signum())),
            Op::Sqrt(x) => {
                let half = T::lit(0.5);
                accumulate(grads, *x, g.zip_map(y, |gv, r| gv * half / r))
            }
            Op::Softmax(x) => {
                let d = y.last_dim();
                let mut gx = g.data().to_vec();
                for (grow, yrow) in gx.chunks_mut(d).zip(y.data().chunks(d)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for (gv, &yv) in grow.iter_mut().zip(yrow) {
                        *gv = yv * (*gv - dot);
                    }
                }
                accumulate(grads, *x, Tensor::new(y.shape(), gx).unwrap())
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(y.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let t = self.value(v);
                    let n = t.shape()[*axis];
                    if self.needs(v) {
                        let mut gv = Vec::with_capacity(t.numel());
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gv.extend_from_slice(&g.data()[base..base + n * inner]);
                        }
                        accumulate(grads, v, Tensor::new(t.shape(), gv).unwrap());
                    }
                    offset += n;
                }
            }
            Op::Slice { input, axis, start } => {
                let t = self.value(*input);
                let (outer, n, inner) = split_axis(t.shape(), *axis);
                let len = y.shape()[*axis];
                let mut gx = vec![T::zero(); t.numel()];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                accumulate(grads, *input, Tensor::new(t.shape(), gx).unwrap())
            }
            Op::Reshape(x) => accumulate(grads, *x, g.reshape(self.shape(*x)).unwrap()),
            Op::Sum(x) => accumulate(grads, *x, Tensor::full(self.shape(*x), g.item())),
            Op::Mean(x) => {
                let n = T::lit(self.value(*x).numel() as f64);
                accumulate(grads, *x, Tensor::full(self.shape(*x), g.item() / n))
            }
            Op::SumAxis { input, axis } => {
                let s = self.shape(*input);
                let (outer, n, inner) = split_axis(s, *axis);
                let mut gx = Vec::with_capacity(outer * n * inner);
                for o in 0..outer {
                    for _ in 0..n {
                        gx.extend_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                    }
                }
                accumulate(grads, *input, Tensor::new(s, gx).unwrap())
            }
            Op::Norm(x) => {
                let t = self.value(*x);
                let d = t.last_dim();
                let guard = T::lit(NORM_GUARD);
                let mut gx = t.data().to_vec();
                for ((row, &gv), &n) in gx.chunks_mut(d).zip(g.data()).zip(y.data()) {
                    let k = gv / n.max(guard);
                    row.iter_mut().for_each(|v| *v = *v * k);
                }
                accumulate(grads, *x, Tensor::new(t.shape(), gx).unwrap())
            }
            Op::Squash(x) => {
                let t = self.value(*x);
                let d = t.last_dim();
                let guard = T::lit(NORM_GUARD);
                let mut gx = vec![T::zero(); t.numel()];
                for ((out, srow), grow) in gx.chunks_mut(d).zip(t.data().chunks(d)).zip(g.data().chunks(d)) {
                    let n2: T = srow.iter().map(|&v| v * v).sum();
                    let n = n2.sqrt();
                    let denom = T::one() + n2;
                    let f = n / denom;
                    let fprime = (T::one() - n2) / (denom * denom);
                    let k = fprime / n.max(guard);
                    let dot: T = srow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                    for ((o, &sv), &gv) in out.iter_mut().zip(srow).zip(grow) {
                        *o = f * gv + k * dot * sv;
                    }
                }
                accumulate(grads, *x, Tensor::new(t.shape(), gx).unwrap())
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let d = inv_std.len();
                let rows = xhat.len() / d;
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![T::zero(); d];
                let mut sum_gx = vec![T::zero(); d];
                for (grow, hrow) in g.data().chunks(d).zip(xhat.chunks(d)) {
                    for k in 0..d {
                        sum_g[k] = sum_g[k] + grow[k];
                        sum_gx[k] = sum_gx[k] + grow[k] * hrow[k];
                    }
                }
                if self.needs(*gamma) {
                    accumulate(grads, *gamma, Tensor::new(&[d], sum_gx.clone()).unwrap());
                }
                if self.needs(*beta) {
                    accumulate(grads, *beta, Tensor::new(&[d], sum_g.clone()).unwrap());
                }
                if self.needs(*x) {
                    let nr = T::lit(rows as f64);
                    let mut gx = Vec::with_capacity(xhat.len());
                    for (grow, hrow) in g.data().chunks(d).zip(xhat.chunks(d)) {
                        for k in 0..d {
                            let v = if *batch_stats {
                                gam[k] * inv_std[k] * (grow[k] - sum_g[k] / nr - hrow[k] * sum_gx[k] / nr)
                            } else {
                                gam[k] * inv_std[k] * grow[k]
                            };
                            gx.push(v);
                        }
                    }
                    accumulate(grads, *x, Tensor::new(self.shape(*x), gx).unwrap());
                }
            }
            Op::Lstm { x, w_ih, w_hh, bias, cache } => {
                self.backward_lstm(g, y, [*x, *w_ih, *w_hh, *bias], cache, grads)
            }
            Op::CapsPredict { u, w } => {
                let (tu, tw) = (self.value(*u), self.value(*w));
                let (batch, prim, din) = (tu.shape()[0], tu.shape()[1], tu.shape()[2]);
                let jd = tw.shape()[1] * tw.shape()[2];
                let mut gu = vec![T::zero(); tu.numel()];
                let mut gw = vec![T::zero(); tw.numel()];
                let mut ui = vec![T::zero(); batch * din];
                let mut gi = vec![T::zero(); batch * jd];
                let mut gui = vec![T::zero(); batch * din];
                for i in 0..prim {
                    for b in 0..batch {
                        ui[b * din..(b + 1) * din].copy_from_slice(&tu.data()[(b * prim + i) * din..][..din]);
                        gi[b * jd..(b + 1) * jd].copy_from_slice(&g.data()[(b * prim + i) * jd..][..jd]);
                    }
                    let wi = &tw.data()[i * jd * din..(i + 1) * jd * din];
                    if self.needs(*u) {
                        T::gemm(batch, jd, din, &gi, false, wi, false, &mut gui, false);
                        for b in 0..batch {
                            gu[(b * prim + i) * din..][..din].copy_from_slice(&gui[b * din..(b + 1) * din]);
                        }
                    }
                    if self.needs(*w) {
                        T::gemm(
                            jd,
                            batch,
                            din,
                            &gi,
                            true,
                            &ui,
                            false,
                            &mut gw[i * jd * din..(i + 1) * jd * din],
                            false,
                        );
                    }
                }
                if self.needs(*u) {
                    accumulate(grads, *u, Tensor::new(tu.shape(), gu).unwrap());
                }
                if self.needs(*w) {
                    accumulate(grads, *w, Tensor::new(tw.shape(), gw).unwrap());
                }
            }
            Op::RoutingSum { c, uhat } => {
                let (tc, tu) = (self.value(*c), self.value(*uhat));
                let s = tu.shape();
                let (batch, prim, classes, d) = (s[0], s[1], s[2], s[3]);
                let mut gc = vec![T::zero(); tc.numel()];
                let mut gu = vec![T::zero(); tu.numel()];
                for b in 0..batch {
                    for i in 0..prim {
                        for j in 0..classes {
                            let ci = (b * prim + i) * classes + j;
                            let gs = &g.data()[(b * classes + j) * d..][..d];
                            let u = &tu.data()[ci * d..][..d];
                            gc[ci] = gs.iter().zip(u).map(|(&a, &b)| a * b).sum();
                            let w = tc.data()[ci];
                            for (o, &gv) in gu[ci * d..][..d].iter_mut().zip(gs) {
                                *o = w * gv;
                            }
                        }
                    }
                }
                if self.needs(*c) {
                    accumulate(grads, *c, Tensor::new(tc.shape(), gc).unwrap());
                }
                if self.needs(*uhat) {
                    accumulate(grads, *uhat, Tensor::new(tu.shape(), gu).unwrap());
                }
            }
            Op::Agreement { uhat, v } => {
                let (tu, tv) = (self.value(*uhat), self.value(*v));
                let s = tu.shape();
                let (batch, prim, classes, d) = (s[0], s[1], s[2], s[3]);
                let mut gu = vec![T::zero(); tu.numel()];
                let mut gv = vec![T::zero(); tv.numel()];
                for b in 0..batch {
                    for i in 0..prim {
                        for j in 0..classes {
                            let ai = (b * prim + i) * classes + j;
                            let ga = g.data()[ai];
                            let vrow = &tv.data()[(b * classes + j) * d..][..d];
                            let urow = &tu.data()[ai * d..][..d];
                            for (o, &vv) in gu[ai * d..][..d].iter_mut().zip(vrow) {
                                *o = ga * vv;
                            }
                            for (o, &uv) in gv[(b * classes + j) * d..][..d].iter_mut().zip(urow) {
                                *o = *o + ga * uv;
                            }
                        }
                    }
                }
                if self.needs(*uhat) {
                    accumulate(grads, *uhat, Tensor::new(tu.shape(), gu).unwrap());
                }
                if self.needs(*v) {
                    accumulate(grads, *v, Tensor::new(tv.shape(), gv).unwrap());
                }
            }
            Op::SoftmaxXent { logits, probs, targets } => {
                let k = targets.last_dim();
                let rows = targets.numel() / k;
                let scale = g.item() / T::lit(rows as f64);
                let mut gz = probs.clone();
                for (prow, trow) in gz.chunks_mut(k).zip(targets.data().chunks(k)) {
                    let tsum: T = trow.iter().copied().sum();
                    for (p, &t) in prow.iter_mut().zip(trow) {
                        *p = (*p * tsum - t) * scale;
                    }
                }
                accumulate(grads, *logits, Tensor::new(targets.shape(), gz).unwrap())
            }
            Op::BceLogits { logits, targets } => {
                let z = self.value(*logits);
                let scale = g.item() / T::lit(z.numel() as f64);
                let gz = z.zip_map(targets, |x, t| (sigmoid(x) - t) * scale);
                accumulate(grads, *logits, gz)
            }
        }
    }

    fn backward_lstm(
        &self,
        g: Tensor<T>,
        hout: &Tensor<T>,
        [x, w_ih, w_hh, bias]: [Var; 4],
        cache: &LstmCache<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let LstmCache { gates, cell, cell_tanh, batch, steps, input, hidden, reverse } = cache;
        let (batch, steps, input, hidden) = (*batch, *steps, *input, *hidden);
        let g4 = 4 * hidden;
        let whh = self.value(w_hh).data();
        let out = hout.data();
        let mut dz_all = vec![T::zero(); batch * steps * g4];
        let mut dwhh = vec![T::zero(); hidden * g4];
        let mut dh_next = vec![T::zero(); batch * hidden];
        let mut dc_next = vec![T::zero(); batch * hidden];
        let mut dz = vec![T::zero(); batch * g4];
        let mut h_prev = vec![T::zero(); batch * hidden];
        let pos = |s: usize| if *reverse { steps - 1 - s } else { s };
        for s in (0..steps).rev() {
            let t = pos(s);
            for bi in 0..batch {
                for k in 0..hidden {
                    let at = (bi * steps + t) * hidden + k;
                    let gb = (bi * steps + t) * g4;
                    let (i, f, gg, o) =
                        (gates[gb + k], gates[gb + hidden + k], gates[gb + 2 * hidden + k], gates[gb + 3 * hidden + k]);
                    let c_prev = if s > 0 { cell[(bi * steps + pos(s - 1)) * hidden + k] } else { T::zero() };
                    let ct = cell_tanh[at];
                    let dh = g.data()[at] + dh_next[bi * hidden + k];
                    let dc = dh * o * (T::one() - ct * ct) + dc_next[bi * hidden + k];
                    let row = &mut dz[bi * g4..(bi + 1) * g4];
                    row[k] = dc * gg * i * (T::one() - i);
                    row[hidden + k] = dc * c_prev * f * (T::one() - f);
                    row[2 * hidden + k] = dc * i * (T::one() - gg * gg);
                    row[3 * hidden + k] = dh * ct * o * (T::one() - o);
                    dc_next[bi * hidden + k] = dc * f;
                    h_prev[bi * hidden + k] =
                        if s > 0 { out[(bi * steps + pos(s - 1)) * hidden + k] } else { T::zero() };
                }
                dz_all[(bi * steps + t) * g4..(bi * steps + t + 1) * g4].copy_from_slice(&dz[bi * g4..(bi + 1) * g4]);
            }
            T::gemm(hidden, batch, g4, &h_prev, true, &dz, false, &mut dwhh, true);
            T::gemm(batch, g4, hidden, &dz, false, whh, true, &mut dh_next, false);
        }
        if self.needs(w_hh) {
            accumulate(grads, w_hh, Tensor::new(&[hidden, g4], dwhh).unwrap());
        }
        if self.needs(bias) {
            let mut db = vec![T::zero(); g4];
            for row in dz_all.chunks(g4) {
                for (a, &v) in db.iter_mut().zip(row) {
                    *a = *a + v;
                }
            }
            accumulate(grads, bias, Tensor::new(&[g4], db).unwrap());
        }
        if self.needs(w_ih) {
            let mut dw = vec![T::zero(); input * g4];
            T::gemm(input, batch * steps, g4, self.value(x).data(), true, &dz_all, false, &mut dw, false);
            accumulate(grads, w_ih, Tensor::new(&[input, g4], dw).unwrap());
        }
        if self.needs(x) {
            let mut dx = vec![T::zero(); batch * steps * input];
            T::gemm(batch * steps, g4, input, &dz_all, false, self.value(w_ih).data(), true, &mut dx, false);
            accumulate(grads, x, Tensor::new(&[batch, steps, input], dx).unwrap());
        }
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    row.iter_mut().for_each(|v| *v = *v / total);
}
