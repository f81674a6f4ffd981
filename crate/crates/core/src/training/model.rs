//! The capsule classifier and its two BiLSTM baselines.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::capsnet::{length_layer, CapsLayer, Decoder, LabelMode, MarginLoss, DECODER_HIDDEN};
use crate::error::{shape_err, Error, Result};
use crate::features::{apply_scaler, FeatureMatrix, ScalerParams};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::layers::{dropout, AttentionPool, BatchNorm, BiLstm, BnUpdate, Dense};
use crate::nn::params::{Bound, ParamId, ParamStore};
use crate::nn::Graph;
use crate::nn::Var;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::config::{ModelKind, RunConfig};

#[derive(Debug, Clone)]
pub enum Head {
    Caps { caps: CapsLayer, decoder: Option<Decoder> },
    MeanPool { dense: Dense },
    Attention { pool: AttentionPool, dense: Dense },
}

/// Trunk (batch norm and two BiLSTM layers) plus a classification head. The
/// store also carries the feature scaler so a checkpoint is self-contained.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub cfg: RunConfig,
    pub n_dims: usize,
    pub n_classes: usize,
    pub store: ParamStore<T>,
    pub bn: BatchNorm,
    pub lstm1: BiLstm,
    pub lstm2: BiLstm,
    pub head: Head,
    scaler_min: ParamId,
    scaler_max: ParamId,
}

/// Graph handles from one forward pass.
pub struct Output<T> {
    pub params: Bound,
    /// Class lengths for capsules, logits for the baselines. `[B, K]`
    pub scores: Var,
    /// Class activity vectors `[B, K, caps_dim]` for the capsule head.
    pub caps: Option<Var>,
    pub bn_update: Option<BnUpdate<T>>,
}

/// Eval-mode results for a batch.
#[derive(Debug, Clone)]
pub struct Inference<T> {
    /// Per-class probabilities in `[0, 1]`. `[B, K]`
    pub probs: Tensor<T>,
    pub caps: Option<Tensor<T>>,
}

impl<T: Scalar> Model<T> {
    pub fn new<R: Rng>(cfg: &RunConfig, n_dims: usize, n_classes: usize, rng: &mut R) -> Result<Self> {
        Self::with_decoder_hidden(cfg, n_dims, n_classes, DECODER_HIDDEN, rng)
    }

    /// As [`Model::new`] with custom decoder hidden widths.
    pub fn with_decoder_hidden<R: Rng>(
        cfg: &RunConfig,
        n_dims: usize,
        n_classes: usize,
        decoder_hidden: [usize; 2],
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        if n_dims == 0 || n_classes == 0 {
            return Err(Error::Config(format!(
                "model needs inputs and classes, got {n_dims} dims and {n_classes} classes"
            )));
        }
        let mut store = ParamStore::new();
        let scaler_min = store.add("scaler.min", Tensor::zeros(&[n_dims]), false);
        let scaler_max = store.add("scaler.max", Tensor::full(&[n_dims], T::one()), false);
        let bn = BatchNorm::new(&mut store, "bn", n_dims);
        let h = cfg.hidden_size;
        let lstm1 = BiLstm::new(&mut store, "lstm1", n_dims, h, rng);
        let lstm2 = BiLstm::new(&mut store, "lstm2", lstm1.output_dim(), h, rng);
        let d = lstm2.output_dim();
        let head = match cfg.model {
            ModelKind::Caps => {
                let caps =
                    CapsLayer::new(&mut store, "caps", cfg.t_fix, d, n_classes, cfg.caps_dim, cfg.routing_iters, rng)?;
                let decoder = cfg.use_decoder.then(|| {
                    let out = cfg.t_fix * n_dims;
                    Decoder::with_hidden(&mut store, "decoder", n_classes, cfg.caps_dim, out, decoder_hidden, rng)
                });
                Head::Caps { caps, decoder }
            }
            ModelKind::Lstm => Head::MeanPool { dense: Dense::new(&mut store, "out", d, n_classes, rng) },
            ModelKind::Att => Head::Attention {
                pool: AttentionPool::new(&mut store, "attn", d, h, rng),
                dense: Dense::new(&mut store, "out", d, n_classes, rng),
            },
        };
        Ok(Self { cfg: cfg.clone(), n_dims, n_classes, store, bn, lstm1, lstm2, head, scaler_min, scaler_max })
    }

    pub fn scaler(&self) -> ScalerParams<T> {
        ScalerParams {
            min: self.store.get(self.scaler_min).data().to_vec(),
            max: self.store.get(self.scaler_max).data().to_vec(),
        }
    }

    pub fn set_scaler(&mut self, s: &ScalerParams<T>) -> Result<()> {
        if s.n_dims() != self.n_dims {
            return Err(shape_err(format!("scaler over {} dims for a {}-dim model", s.n_dims(), self.n_dims)));
        }
        *self.store.get_mut(self.scaler_min) = Tensor::new(&[self.n_dims], s.min.clone())?;
        *self.store.get_mut(self.scaler_max) = Tensor::new(&[self.n_dims], s.max.clone())?;
        Ok(())
    }

    /// Scaled, fixed-length batch `[B, t_fix, n_dims]` from unscaled features.
    pub fn input_batch(&self, mats: &[FeatureMatrix<T>]) -> Result<Tensor<T>> {
        let scaler = self.scaler();
        let t = self.cfg.t_fix;
        let mut data = Vec::with_capacity(mats.len() * t * self.n_dims);
        for m in mats {
            data.extend(apply_scaler(m, &scaler)?.fit_frames(t).data);
        }
        Tensor::new(&[mats.len(), t, self.n_dims], data)
    }

    /// Eval-mode inference over any number of unscaled matrices, in batches.
    pub fn infer_all(&self, mats: &[FeatureMatrix<T>]) -> Result<Vec<Inference<T>>> {
        mats.chunks(self.cfg.batch_size.max(1)).map(|chunk| self.infer(&self.input_batch(chunk)?)).collect()
    }

    pub fn forward<R: Rng>(&self, g: &mut Graph<T>, x: Var, training: bool, rng: &mut R) -> Result<Output<T>> {
        let bound = self.store.bind(g);
        self.forward_bound(g, &bound, x, training, rng)
    }

    /// Forward pass on `x: [B, t_fix, n_dims]` with parameters already on
    /// the graph.
    pub fn forward_bound<R: Rng>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Output<T>> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[1] != self.cfg.t_fix || s[2] != self.n_dims {
            return Err(shape_err(format!("model input {s:?}, expected [B, {}, {}]", self.cfg.t_fix, self.n_dims)));
        }
        let (h, bn_update) = self.bn.forward(g, p, &self.store, x, training)?;
        let h = self.lstm1.run(g, p, h)?;
        let h = self.lstm2.run(g, p, h)?;
        let h = dropout(g, h, self.cfg.dropout, training, rng)?;
        let (scores, caps) = match &self.head {
            Head::Caps { caps, .. } => {
                let primary = g.squash(h);
                let v = caps.forward(g, p, primary)?.v;
                (length_layer(g, v), Some(v))
            }
            Head::MeanPool { dense } => {
                let pooled = g.mean_axis(h, 1)?;
                (dense.forward(g, p, pooled)?, None)
            }
            Head::Attention { pool, dense } => {
                let pooled = pool.forward(g, p, h)?;
                (dense.forward(g, p, pooled)?, None)
            }
        };
        Ok(Output { params: p.clone(), scores, caps, bn_update })
    }

    /// Training objective. Capsules: margin loss plus the weighted decoder
    /// MAE when a decoder exists and `recon` (`[B, t_fix·n_dims]`) is given.
    /// Baselines: softmax cross-entropy (single) or binary cross-entropy
    /// (multi). `targets` is multi-hot `[B, K]`.
    pub fn loss(
        &self,
        g: &mut Graph<T>,
        out: &Output<T>,
        targets: &Tensor<T>,
        recon: Option<&Tensor<T>>,
        mode: LabelMode,
    ) -> Result<Var> {
        match &self.head {
            Head::Caps { decoder, .. } => {
                let margin = MarginLoss::with_lambda(self.cfg.lambda).forward(g, out.scores, targets)?;
                match (decoder, recon, out.caps) {
                    (Some(dec), Some(target), Some(caps)) => {
                        let r = dec.forward(g, &out.params, caps, targets, target)?;
                        let weighted = g.scale(r.loss, T::lit(self.cfg.recon_weight));
                        g.add(margin, weighted)
                    }
                    _ => Ok(margin),
                }
            }
            _ => match mode {
                LabelMode::Single => g.softmax_cross_entropy(out.scores, targets),
                LabelMode::Multi => g.bce_with_logits(out.scores, targets),
            },
        }
    }

    /// Eval-mode class probabilities and, for capsules, activity vectors.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Inference<T>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, xv, false, &mut ChaCha8Rng::seed_from_u64(0))?;
        let probs = match (&self.head, self.cfg.mode) {
            (Head::Caps { .. }, _) => g.value(out.scores).clone(),
            (_, LabelMode::Single) => {
                let p = g.softmax(out.scores);
                g.value(p).clone()
            }
            (_, LabelMode::Multi) => {
                let p = g.sigmoid(out.scores);
                g.value(p).clone()
            }
        };
        g.check_finite()?;
        Ok(Inference { probs, caps: out.caps.map(|v| g.value(v).clone()) })
    }

    pub fn apply_bn_update(&mut self, u: &BnUpdate<T>) {
        self.bn.update_running(&mut self.store, u);
    }

    pub fn to_checkpoint(&self, class_names: &[String]) -> Checkpoint {
        let meta = format!("n_dims={}\nn_classes={}\nclasses={}\n", self.n_dims, self.n_classes, class_names.join("|"));
        Checkpoint::from_store(&self.store, self.cfg.to_text(), meta)
    }

    /// Rebuilds a model from a checkpoint; returns it with the class names.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, Vec<String>)> {
        let cfg = RunConfig::parse(&ckpt.config)?;
        let field =
            |key: &str| ckpt.meta_value(key).ok_or_else(|| Error::Format(format!("checkpoint metadata lacks `{key}`")));
        let number = |key: &str| -> Result<usize> {
            field(key)?.parse().map_err(|_| Error::Format(format!("checkpoint metadata `{key}` is not a count")))
        };
        let (n_dims, n_classes) = (number("n_dims")?, number("n_classes")?);
        let classes: Vec<String> = field("classes")?.split('|').map(str::to_string).collect();
        if classes.len() != n_classes {
            return Err(Error::Format(format!("{} class names for {n_classes} classes", classes.len())));
        }
        let mut model = Self::new(&cfg, n_dims, n_classes, &mut ChaCha8Rng::seed_from_u64(0))?;
        ckpt.fill_store(&mut model.store)?;
        Ok((model, classes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(kind: ModelKind) -> RunConfig {
        RunConfig {
            model: kind,
            hidden_size: 3,
            caps_dim: 4,
            t_fix: 5,
            dropout: 0.2,
            use_decoder: true,
            ..Default::default()
        }
    }

    #[test]
    fn output_shapes_for_every_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for kind in [ModelKind::Caps, ModelKind::Lstm, ModelKind::Att] {
            let model = Model::<f64>::new(&tiny(kind), 6, 3, &mut rng).unwrap();
            let x = Tensor::full(&[2, 5, 6], 0.3);
            let inf = model.infer(&x).unwrap();
            assert_eq!(inf.probs.shape(), [2, 3]);
            assert!(inf.probs.data().iter().all(|p| (0.0..=1.0).contains(p)));
            assert_eq!(inf.caps.is_some(), kind == ModelKind::Caps);
        }
    }

    #[test]
    fn checkpoint_restores_identical_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model = Model::<f64>::new(&tiny(ModelKind::Caps), 6, 3, &mut rng).unwrap();
        model.set_scaler(&ScalerParams { min: vec![-1.0; 6], max: vec![2.0; 6] }).unwrap();
        let names: Vec<String> = ["a", "b", "c"].map(String::from).to_vec();
        let ckpt = Checkpoint::from_bytes(&model.to_checkpoint(&names).to_bytes()).unwrap();
        let (back, classes) = Model::<f64>::from_checkpoint(&ckpt).unwrap();
        assert_eq!(classes, names);
        assert_eq!(back.store, model.store);
        assert_eq!(back.scaler(), model.scaler());
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let model = Model::<f64>::new(&tiny(ModelKind::Lstm), 6, 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(matches!(model.infer(&Tensor::zeros(&[2, 4, 6])), Err(Error::Shape(_))));
    }
}
