//! Mini-batch training with per-epoch evaluation and best-test selection.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::capsnet::{predict, LabelMode};
use crate::error::{shape_err, Error, Result};
use crate::features::{apply_scaler, fit_scaler, FeatureMatrix, ScalerParams};
use crate::nn::Graph;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::adam::Adam;
use crate::training::config::RunConfig;
use crate::training::metrics::{accuracy, confusion, EpochRecord, Metrics};
use crate::training::model::Model;

/// Unscaled feature matrices with their label sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub features: Vec<FeatureMatrix<T>>,
    pub labels: Vec<BTreeSet<usize>>,
    pub class_names: Vec<String>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(
        features: Vec<FeatureMatrix<T>>,
        labels: Vec<BTreeSet<usize>>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(shape_err(format!("{} feature matrices for {} label sets", features.len(), labels.len())));
        }
        if let Some(bad) = labels.iter().flatten().find(|&&k| k >= class_names.len()) {
            return Err(shape_err(format!("label {bad} outside {} classes", class_names.len())));
        }
        Ok(Self { features, labels, class_names })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn n_dims(&self) -> Option<usize> {
        self.features.first().map(|m| m.n_dims)
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            features: idx.iter().map(|&i| self.features[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i].clone()).collect(),
            class_names: self.class_names.clone(),
        }
    }
}

/// Scaled, fixed-length rows ready for batching.
pub struct Prepared<T> {
    rows: Vec<Vec<T>>,
    labels: Vec<BTreeSet<usize>>,
    t_fix: usize,
    n_dims: usize,
    n_classes: usize,
}

impl<T: Scalar> Prepared<T> {
    pub fn new(data: &Dataset<T>, scaler: &ScalerParams<T>, t_fix: usize) -> Result<Self> {
        let rows =
            data.features.iter().map(|m| Ok(apply_scaler(m, scaler)?.fit_frames(t_fix).data)).collect::<Result<_>>()?;
        Ok(Self { rows, labels: data.labels.clone(), t_fix, n_dims: scaler.n_dims(), n_classes: data.n_classes() })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Inputs `[B, t_fix, n_dims]`.
    pub fn inputs(&self, idx: &[usize]) -> Result<Tensor<T>> {
        let data = idx.iter().flat_map(|&i| self.rows[i].iter().copied()).collect();
        Tensor::new(&[idx.len(), self.t_fix, self.n_dims], data)
    }

    /// Flattened reconstruction targets `[B, t_fix·n_dims]`.
    pub fn recon_targets(&self, idx: &[usize]) -> Result<Tensor<T>> {
        let data = idx.iter().flat_map(|&i| self.rows[i].iter().copied()).collect();
        Tensor::new(&[idx.len(), self.t_fix * self.n_dims], data)
    }

    /// Multi-hot `[B, K]`.
    pub fn targets(&self, idx: &[usize]) -> Result<Tensor<T>> {
        let k = self.n_classes;
        let mut data = vec![T::zero(); idx.len() * k];
        for (r, &i) in idx.iter().enumerate() {
            for &c in &self.labels[i] {
                data[r * k + c] = T::one();
            }
        }
        Tensor::new(&[idx.len(), k], data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub predictions: Vec<BTreeSet<usize>>,
    pub metric: f64,
    pub confusion: Vec<Vec<usize>>,
}

fn evaluate_prepared<T: Scalar>(model: &Model<T>, data: &Prepared<T>) -> Result<Evaluation> {
    let mut predictions = Vec::with_capacity(data.len());
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(model.cfg.batch_size.max(1)) {
        let probs = model.infer(&data.inputs(idx)?)?.probs;
        predictions.extend(predict(&probs, model.cfg.mode, model.cfg.threshold));
    }
    let metric = accuracy(&predictions, &data.labels, model.cfg.mode, data.n_classes)?;
    let confusion = confusion(&predictions, &data.labels, model.cfg.mode, data.n_classes);
    Ok(Evaluation { predictions, metric, confusion })
}

/// Scores `model` on unscaled data using the scaler stored in the model.
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &Dataset<T>) -> Result<Evaluation> {
    if data.n_classes() != model.n_classes {
        return Err(shape_err(format!("{} dataset classes for a {}-class model", data.n_classes(), model.n_classes)));
    }
    evaluate_prepared(model, &Prepared::new(data, &model.scaler(), model.cfg.t_fix)?)
}

pub struct TrainOutcome<T> {
    /// Parameters from the epoch with the best test metric.
    pub model: Model<T>,
    pub metrics: Metrics,
}

pub fn train<T: Scalar>(cfg: &RunConfig, train_set: &Dataset<T>, test_set: &Dataset<T>) -> Result<TrainOutcome<T>> {
    train_with(cfg, train_set, test_set, |_| {})
}

/// Like [`train`], calling `on_epoch` after every epoch.
pub fn train_with<T: Scalar>(
    cfg: &RunConfig,
    train_set: &Dataset<T>,
    test_set: &Dataset<T>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train_set.is_empty() || test_set.is_empty() {
        return Err(Error::InsufficientData("training and test splits must be non-empty".into()));
    }
    if train_set.class_names != test_set.class_names {
        return Err(Error::Config("training and test splits disagree on class names".into()));
    }
    if cfg.mode == LabelMode::Single && train_set.labels.iter().chain(&test_set.labels).any(|l| l.len() != 1) {
        return Err(Error::Config("single-label mode needs exactly one label per example".into()));
    }
    let n_dims = train_set.n_dims().expect("non-empty");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::new(cfg, n_dims, train_set.n_classes(), &mut rng)?;
    let scaler = fit_scaler(&train_set.features)?;
    model.set_scaler(&scaler)?;
    let train_data = Prepared::new(train_set, &scaler, cfg.t_fix)?;
    let test_data = Prepared::new(test_set, &scaler, cfg.t_fix)?;

    let initial = evaluate_prepared(&model, &test_data)?;
    let mut best = (model.clone(), 0, initial.metric, initial.confusion);
    let mut adam = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..train_data.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0;
        for idx in order.chunks(cfg.batch_size) {
            step += 1;
            let mut g = Graph::new();
            let x = g.constant(train_data.inputs(idx)?);
            let bound = model.store.bind(&mut g);
            let out = model.forward_bound(&mut g, &bound, x, true, &mut rng)?;
            let recon = train_data.recon_targets(idx)?;
            let loss = model.loss(&mut g, &out, &train_data.targets(idx)?, Some(&recon), cfg.mode)?;
            let value = g.value(loss).item();
            if !value.is_finite() || g.fault().is_some() {
                return Err(Error::Divergence { epoch, step });
            }
            let mut grads = g.backward(loss)?;
            let grads: Vec<_> = bound.vars().iter().map(|&v| grads.take(v)).collect();
            adam.update(&mut model.store, &grads)?;
            if let Some(u) = &out.bn_update {
                model.apply_bn_update(u);
            }
            loss_sum += value.as_f64() * idx.len() as f64;
            seen += idx.len();
        }
        let eval = evaluate_prepared(&model, &test_data)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            test_metric: eval.metric,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        if eval.metric > best.2 || best.1 == 0 {
            best = (model.clone(), epoch, eval.metric, eval.confusion);
        }
        records.push(record);
    }
    let (model, best_epoch, best_metric, confusion) = best;
    Ok(TrainOutcome { model, metrics: Metrics { mode: cfg.mode, epochs: records, best_epoch, best_metric, confusion } })
}
