//! Central finite-difference checks of every differentiable operation.
//!
//! Each check reduces the operation's output to a scalar with fixed random
//! weights, then compares the analytic gradient from [`Graph::backward`]
//! against `(f(x + h) − f(x − h)) / 2h` for every checked coordinate.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::capsnet::{route, route_predictions, Decoder, MarginLoss};
use crate::error::Result;
use crate::nn::layers::{attention_pool, BiLstm};
use crate::nn::params::ParamStore;
use crate::nn::{BnMode, Graph, Var};
use crate::tensor::Tensor;
use crate::training::{LabelMode, Model, ModelKind, RunConfig};

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor so that near-zero gradients are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub trials: usize,
    pub coordinates: usize,
    pub max_rel_err: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= TOLERANCE
    }
}

/// Input to a gradient check.
pub struct CheckInput {
    pub value: Tensor<f64>,
    /// Whether this input is differentiated (otherwise a constant).
    pub wrt: bool,
}

impl CheckInput {
    pub fn var(value: Tensor<f64>) -> Self {
        Self { value, wrt: true }
    }

    pub fn constant(value: Tensor<f64>) -> Self {
        Self { value, wrt: false }
    }
}

fn record(g: &mut Graph<f64>, inputs: &[CheckInput]) -> Vec<Var> {
    inputs.iter().map(|i| if i.wrt { g.param(i.value.clone()) } else { g.constant(i.value.clone()) }).collect()
}

/// Runs one check and returns `(max relative error, coordinates checked)`.
///
/// At most `max_coords` coordinates per input are sampled; `None` checks all.
pub fn check<F, R>(inputs: &[CheckInput], build: F, max_coords: Option<usize>, rng: &mut R) -> Result<(f64, usize)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    R: Rng,
{
    let mut g = Graph::new();
    let vars = record(&mut g, inputs);
    let out = build(&mut g, &vars)?;
    g.check_finite()?;
    let weights = Tensor::new(g.shape(out), (0..g.value(out).numel()).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w)?;
    let loss = g.sum(prod);
    let grads = g.backward(loss)?;

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|v| g.constant(v.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum())
    };

    let mut values: Vec<Tensor<f64>> = inputs.iter().map(|i| i.value.clone()).collect();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (k, input) in inputs.iter().enumerate() {
        if !input.wrt {
            continue;
        }
        let n = input.value.numel();
        let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(input.value.shape()));
        let coords: Vec<usize> = match max_coords {
            Some(m) if m < n => sample(rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = values[k].data()[c];
            values[k].data_mut()[c] = orig + STEP;
            let plus = eval(&values)?;
            values[k].data_mut()[c] = orig - STEP;
            let minus = eval(&values)?;
            values[k].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic.data()[c], numeric));
            checked += 1;
        }
    }
    Ok((worst, checked))
}

fn uniform<R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape")
}

fn dim<R: Rng>(rng: &mut R, max: usize) -> usize {
    rng.gen_range(1..=max)
}

type Case = Box<dyn Fn(&mut ChaCha8Rng) -> Result<(f64, usize)>>;

fn case<F>(f: F) -> Case
where
    F: Fn(&mut ChaCha8Rng) -> Result<(f64, usize)> + 'static,
{
    Box::new(f)
}

/// Lengths in (0, 1) kept clear of the margin kinks at 0.1 and 0.9.
fn lengths_off_kinks<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = rng.gen_range(0.01..0.99);
            if (v - 0.1).abs() > 1e-3 && (v - 0.9).abs() > 1e-3 {
                break v;
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape")
}

fn multi_hot<R: Rng>(rng: &mut R, rows: usize, classes: usize) -> Tensor<f64> {
    let data = (0..rows * classes).map(|_| if rng.gen::<bool>() { 1.0 } else { 0.0 }).collect();
    Tensor::new(&[rows, classes], data).expect("shape")
}

fn tiny_model_config() -> RunConfig {
    RunConfig {
        model: ModelKind::Caps,
        caps_dim: 2,
        routing_iters: 3,
        use_decoder: true,
        hidden_size: 2,
        dropout: 0.0,
        t_fix: 4,
        ..RunConfig::default()
    }
}

/// Every differentiable operation, as `(name, case)` pairs.
fn cases() -> Vec<(&'static str, Case)> {
    let mut v: Vec<(&'static str, Case)> = vec![
        (
            "matmul",
            case(|r| {
                let (m, k, n) = (dim(r, 4), dim(r, 4), dim(r, 4));
                let ins =
                    [CheckInput::var(uniform(r, &[m, k], -1.0, 1.0)), CheckInput::var(uniform(r, &[k, n], -1.0, 1.0))];
                check(&ins, |g, x| g.matmul(x[0], x[1]), None, r)
            }),
        ),
        (
            "add",
            case(|r| {
                let (a, b) = (dim(r, 3), dim(r, 4));
                let ins =
                    [CheckInput::var(uniform(r, &[a, b], -1.0, 1.0)), CheckInput::var(uniform(r, &[b], -1.0, 1.0))];
                check(&ins, |g, x| g.add(x[0], x[1]), None, r)
            }),
        ),
        (
            "sub",
            case(|r| {
                let (a, b) = (dim(r, 3), dim(r, 4));
                let ins =
                    [CheckInput::var(uniform(r, &[a, b], -1.0, 1.0)), CheckInput::var(uniform(r, &[a, b], -1.0, 1.0))];
                check(&ins, |g, x| g.sub(x[0], x[1]), None, r)
            }),
        ),
        (
            "mul",
            case(|r| {
                let (a, b) = (dim(r, 3), dim(r, 4));
                let ins =
                    [CheckInput::var(uniform(r, &[a, b], -1.0, 1.0)), CheckInput::var(uniform(r, &[b], -1.0, 1.0))];
                check(&ins, |g, x| g.mul(x[0], x[1]), None, r)
            }),
        ),
        (
            "sigmoid",
            case(|r| {
                let ins = [CheckInput::var({
                    let s = [dim(r, 3), dim(r, 4)];
                    uniform(r, &s, -3.0, 3.0)
                })];
                check(&ins, |g, x| Ok(g.sigmoid(x[0])), None, r)
            }),
        ),
        (
            "tanh",
            case(|r| {
                let ins = [CheckInput::var({
                    let s = [dim(r, 3), dim(r, 4)];
                    uniform(r, &s, -3.0, 3.0)
                })];
                check(&ins, |g, x| Ok(g.tanh(x[0])), None, r)
            }),
        ),
        (
            "relu",
            case(|r| {
                let ins = [CheckInput::var({
                    let s = [dim(r, 3), dim(r, 4)];
                    away_from_zero(r, &s)
                })];
                check(&ins, |g, x| Ok(g.relu(x[0])), None, r)
            }),
        ),
        (
            "softmax",
            case(|r| {
                let ins = [CheckInput::var({
                    let s = [dim(r, 3), dim(r, 5)];
                    uniform(r, &s, -2.0, 2.0)
                })];
                check(&ins, |g, x| Ok(g.softmax(x[0])), None, r)
            }),
        ),
        (
            "concat",
            case(|r| {
                let (a, b, c) = (dim(r, 3), dim(r, 3), dim(r, 3));
                let ins =
                    [CheckInput::var(uniform(r, &[a, b], -1.0, 1.0)), CheckInput::var(uniform(r, &[a, c], -1.0, 1.0))];
                check(&ins, |g, x| g.concat(&[x[0], x[1]], 1), None, r)
            }),
        ),
        (
            "slice",
            case(|r| {
                let (a, b) = (dim(r, 3), dim(r, 4) + 1);
                let start = r.gen_range(0..b);
                let len = r.gen_range(1..=b - start);
                let ins = [CheckInput::var(uniform(r, &[a, b, 2], -1.0, 1.0))];
                check(&ins, move |g, x| g.slice(x[0], 1, start, len), None, r)
            }),
        ),
        (
            "sum",
            case(|r| {
                let ins = [CheckInput::var({
                    let s = [dim(r, 3), dim(r, 4)];
                    uniform(r, &s, -1.0, 1.0)
                })];
                check(&ins, |g, x| Ok(g.sum(x[0])), None, r)
            }),
        ),
        (
            "mean",
            case(|r| {
                let ins = [CheckInput::var({
                    let s = [dim(r, 3), dim(r, 4)];
                    uniform(r, &s, -1.0, 1.0)
                })];
                check(&ins, |g, x| Ok(g.mean(x[0])), None, r)
            }),
        ),
        (
            "sum_axis",
            case(|r| {
                let axis = r.gen_range(0..3);
                let ins = [CheckInput::var({
                    let s = [dim(r, 3), dim(r, 3), dim(r, 3)];
                    uniform(r, &s, -1.0, 1.0)
                })];
                check(&ins, move |g, x| g.sum_axis(x[0], axis), None, r)
            }),
        ),
        (
            "square",
            case(|r| {
                let ins = [CheckInput::var({
                    let s = [dim(r, 3), dim(r, 4)];
                    uniform(r, &s, -2.0, 2.0)
                })];
                check(&ins, |g, x| Ok(g.square(x[0])), None, r)
            }),
        ),
        (
            "abs",
            case(|r| {
                let ins = [CheckInput::var({
                    let s = [dim(r, 3), dim(r, 4)];
                    away_from_zero(r, &s)
                })];
                check(&ins, |g, x| Ok(g.abs(x[0])), None, r)
            }),
        ),
        (
            "sqrt",
            case(|r| {
                let ins = [CheckInput::var({
                    let s = [dim(r, 3), dim(r, 4)];
                    uniform(r, &s, 0.5, 2.0)
                })];
                check(&ins, |g, x| Ok(g.sqrt(x[0])), None, r)
            }),
        ),
        (
            "l2_norm",
            case(|r| {
                let ins = [CheckInput::var({
                    let s = [dim(r, 3), dim(r, 4) + 1];
                    uniform(r, &s, -1.0, 1.0)
                })];
                check(&ins, |g, x| Ok(g.norm(x[0])), None, r)
            }),
        ),
        (
            "batch_norm_train",
            case(|r| {
                let (b, t, d) = (dim(r, 2) + 1, dim(r, 3), dim(r, 3));
                let ins = [
                    CheckInput::var(uniform(r, &[b, t, d], -2.0, 2.0)),
                    CheckInput::var(uniform(r, &[d], 0.5, 1.5)),
                    CheckInput::var(uniform(r, &[d], -0.5, 0.5)),
                ];
                check(&ins, |g, x| Ok(g.batch_norm(x[0], x[1], x[2], BnMode::Batch { eps: 1e-5 })?.0), None, r)
            }),
        ),
        (
            "batch_norm_eval",
            case(|r| {
                let (b, t, d) = (dim(r, 2), dim(r, 3), dim(r, 3));
                let mean: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
                let var: Vec<f64> = (0..d).map(|_| r.gen_range(0.5..2.0)).collect();
                let ins = [
                    CheckInput::var(uniform(r, &[b, t, d], -2.0, 2.0)),
                    CheckInput::var(uniform(r, &[d], 0.5, 1.5)),
                    CheckInput::var(uniform(r, &[d], -0.5, 0.5)),
                ];
                check(
                    &ins,
                    move |g, x| {
                        Ok(g.batch_norm(x[0], x[1], x[2], BnMode::Running { mean: &mean, var: &var, eps: 1e-5 })?.0)
                    },
                    None,
                    r,
                )
            }),
        ),
        (
            "bilstm_bptt",
            case(|r| {
                let (b, t, d, h) = (2, 3, dim(r, 3), 2);
                let mut store = ParamStore::<f64>::new();
                BiLstm::new(&mut store, "l", d, h, r);
                let mut ins = vec![CheckInput::var(uniform(r, &[b, t, d], -1.0, 1.0))];
                ins.extend(store.iter().map(|p| CheckInput::var(p.value.map(|v| v + 0.1))));
                check(
                    &ins,
                    |g, x| {
                        let f = g.lstm(x[0], x[1], x[2], x[3], false)?;
                        let bw = g.lstm(x[0], x[4], x[5], x[6], true)?;
                        g.concat(&[f, bw], 2)
                    },
                    None,
                    r,
                )
            }),
        ),
        (
            "attention_pool",
            case(|r| {
                let (b, t, d, a) = (dim(r, 2), dim(r, 4), dim(r, 3), dim(r, 3));
                let ins = [
                    CheckInput::var(uniform(r, &[b, t, d], -1.0, 1.0)),
                    CheckInput::var(uniform(r, &[d, a], -1.0, 1.0)),
                    CheckInput::var(uniform(r, &[a, 1], -1.0, 1.0)),
                ];
                check(&ins, |g, x| attention_pool(g, x[0], x[1], x[2]), None, r)
            }),
        ),
        (
            "squash",
            case(|r| {
                let ins = [CheckInput::var({
                    let s = [dim(r, 3), dim(r, 3), dim(r, 4) + 1];
                    uniform(r, &s, -2.0, 2.0)
                })];
                check(&ins, |g, x| Ok(g.squash(x[0])), None, r)
            }),
        ),
        (
            "caps_predict",
            case(|r| {
                let (b, i, j, dc, din) = (dim(r, 2), dim(r, 3), dim(r, 3), dim(r, 2) + 1, dim(r, 3));
                let ins = [
                    CheckInput::var(uniform(r, &[b, i, din], -1.0, 1.0)),
                    CheckInput::var(uniform(r, &[i, j, dc, din], -1.0, 1.0)),
                ];
                check(&ins, |g, x| g.caps_predict(x[0], x[1]), None, r)
            }),
        ),
        (
            "length",
            case(|r| {
                let ins = [CheckInput::var({
                    let s = [dim(r, 3), dim(r, 3), dim(r, 3) + 1];
                    uniform(r, &s, -1.0, 1.0)
                })];
                check(&ins, |g, x| Ok(crate::capsnet::length_layer(g, x[0])), None, r)
            }),
        ),
        (
            "margin_loss",
            case(|r| {
                let (b, k) = (dim(r, 3), dim(r, 4) + 1);
                let targets = multi_hot(r, b, k);
                let lambda = if r.gen::<bool>() { 0.5 } else { 1.0 };
                let ins = [CheckInput::var(lengths_off_kinks(r, &[b, k]))];
                check(&ins, move |g, x| MarginLoss::with_lambda(lambda).forward(g, x[0], &targets), None, r)
            }),
        ),
        (
            "softmax_cross_entropy",
            case(|r| {
                let (b, k) = (dim(r, 3), dim(r, 4) + 1);
                let mut t = Tensor::zeros(&[b, k]);
                for row in 0..b {
                    let c = r.gen_range(0..k);
                    t.data_mut()[row * k + c] = 1.0;
                }
                let ins = [CheckInput::var(uniform(r, &[b, k], -2.0, 2.0))];
                check(&ins, move |g, x| g.softmax_cross_entropy(x[0], &t), None, r)
            }),
        ),
        (
            "bce_with_logits",
            case(|r| {
                let (b, k) = (dim(r, 3), dim(r, 4));
                let t = multi_hot(r, b, k);
                let ins = [CheckInput::var(uniform(r, &[b, k], -2.0, 2.0))];
                check(&ins, move |g, x| g.bce_with_logits(x[0], &t), None, r)
            }),
        ),
        (
            "decoder_mae",
            case(|r| {
                let (b, j, dc, out) = (dim(r, 2), dim(r, 3), 2, dim(r, 4));
                let mut store = ParamStore::<f64>::new();
                let dec = Decoder::with_hidden(&mut store, "dec", j, dc, out, [4, 5], r);
                let targets = multi_hot(r, b, j);
                let target = uniform(r, &[b, out], 0.0, 1.0);
                let mut ins = vec![CheckInput::var(uniform(r, &[b, j, dc], -0.7, 0.7))];
                ins.extend(store.iter().map(|p| CheckInput::var(p.value.map(|v| v + 0.05))));
                check(
                    &ins,
                    move |g, x| {
                        let bound = crate::nn::params::Bound::from_vars(x[1..].to_vec());
                        let rec = dec.forward(g, &bound, x[0], &targets, &target)?;
                        Ok(rec.loss)
                    },
                    None,
                    r,
                )
            }),
        ),
    ];
    for iters in [1usize, 3, 5] {
        let name: &'static str = match iters {
            1 => "routing_1",
            3 => "routing_3",
            _ => "routing_5",
        };
        v.push((
            name,
            case(move |r| {
                let (b, i, j, dc, din) = (dim(r, 2), dim(r, 3) + 1, dim(r, 3) + 1, 2, dim(r, 3));
                let ins = [
                    CheckInput::var(uniform(r, &[b, i, din], -1.0, 1.0)),
                    CheckInput::var(uniform(r, &[i, j, dc, din], -1.0, 1.0)),
                ];
                check(
                    &ins,
                    move |g, x| {
                        let u = g.squash(x[0]);
                        Ok(route(g, u, x[1], iters)?.v)
                    },
                    None,
                    r,
                )
            }),
        ));
    }
    v.push((
        "routing_predictions",
        case(|r| {
            let (b, i, j, dc) = (dim(r, 2), dim(r, 3) + 1, dim(r, 3) + 1, dim(r, 2) + 1);
            let iters = r.gen_range(1..=5);
            let ins = [CheckInput::var(uniform(r, &[b, i, j, dc], -1.0, 1.0))];
            check(&ins, move |g, x| Ok(route_predictions(g, x[0], iters)?.v), None, r)
        }),
    ));
    v
}

/// Full capsule model (batch norm, two BiLSTMs, capsules, margin loss and
/// decoder) on a tiny instance, differentiated with respect to a sample of
/// every parameter tensor.
pub fn check_full_model<R: Rng>(rng: &mut R, coords_per_param: usize) -> Result<(f64, usize)> {
    let cfg = tiny_model_config();
    let (n_dims, n_classes, batch) = (3, 2, 2);
    let model = Model::<f64>::new(&cfg, n_dims, n_classes, rng)?;
    let x = uniform(rng, &[batch, cfg.t_fix, n_dims], -1.0, 1.0);
    let targets = Tensor::from_f64(&[batch, n_classes], &[1.0, 0.0, 0.0, 1.0])?;
    let recon = uniform(rng, &[batch, cfg.t_fix * n_dims], 0.0, 1.0);
    let mut ins = vec![CheckInput::constant(x)];
    // Zero-initialized decoder biases put ReLU units exactly on their kink
    // while capsule outputs are still tiny; move them to a generic point.
    ins.extend(model.store.iter().map(|p| {
        let value = if p.name.starts_with("decoder") && p.name.ends_with(".b") {
            uniform(rng, p.value.shape(), 0.2, 0.6)
        } else {
            p.value.clone()
        };
        CheckInput { value, wrt: p.trainable }
    }));
    check(
        &ins,
        |g, vars| {
            let bound = crate::nn::params::Bound::from_vars(vars[1..].to_vec());
            let out = model.forward_bound(g, &bound, vars[0], true, &mut rand::rngs::mock::StepRng::new(0, 0))?;
            model.loss(g, &out, &targets, Some(&recon), LabelMode::Single)
        },
        Some(coords_per_param),
        rng,
    )
}

/// Runs `trials` randomized checks of every operation plus the full model.
pub fn run_suite(trials: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (name, f) in cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fxhash(name));
        let mut worst = 0.0f64;
        let mut coords = 0;
        for _ in 0..trials {
            let (e, c) = f(&mut rng)?;
            worst = worst.max(e);
            coords += c;
        }
        out.push(CheckResult { name: name.to_string(), trials, coordinates: coords, max_rel_err: worst });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fxhash("full_model"));
    let model_trials = trials.div_ceil(10).max(1);
    let mut worst = 0.0f64;
    let mut coords = 0;
    for _ in 0..model_trials {
        let (e, c) = check_full_model(&mut rng, 6)?;
        worst = worst.max(e);
        coords += c;
    }
    out.push(CheckResult { name: "full_model".into(), trials: model_trials, coordinates: coords, max_rel_err: worst });
    Ok(out)
}

fn fxhash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}
