use std::collections::BTreeSet;

use capsaudio::features::FeatureMatrix;
use capsaudio::nn::checkpoint::Checkpoint;
use capsaudio::nn::{Graph, ParamStore};
use capsaudio::training::{evaluate, train, Adam, Dataset, LabelMode, Model, ModelKind, Prepared, RunConfig};
use capsaudio::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Two classes whose frames are constant and class-distinct.
fn separable(n: usize) -> Dataset<f64> {
    let (frames, dims) = (6, 4);
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let class = i % 2;
        let base = if class == 0 { -1.0 } else { 1.0 };
        let data = (0..frames * dims).map(|k| base * (1.0 + 0.1 * (k % dims) as f64) + 0.02 * (i / 2) as f64).collect();
        features.push(FeatureMatrix::new(data, frames, dims).unwrap());
        labels.push(BTreeSet::from([class]));
    }
    Dataset::new(features, labels, vec!["neg".into(), "pos".into()]).unwrap()
}

fn small(kind: ModelKind) -> RunConfig {
    RunConfig {
        model: kind,
        hidden_size: 8,
        caps_dim: 4,
        t_fix: 6,
        batch_size: 4,
        lr: 1e-2,
        epochs: 50,
        dropout: 0.1,
        ..Default::default()
    }
}

#[test]
fn adam_first_step_matches_hand_value() {
    let mut store = ParamStore::<f64>::new();
    store.add("p", Tensor::scalar(0.0), true);
    let mut adam = Adam::new(0.1);
    adam.update(&mut store, &[Some(Tensor::scalar(1.0))]).unwrap();
    // m̂ = v̂ = 1 after bias correction.
    let want = -0.1 * 1.0 / (1.0f64.sqrt() + 1e-8);
    assert_eq!(store.iter().next().unwrap().value.item(), want);
}

#[test]
fn adam_is_deterministic() {
    let run = || {
        let mut store = ParamStore::<f64>::new();
        store.add("p", Tensor::from_f64(&[3], &[0.5, -0.25, 2.0]).unwrap(), true);
        let mut adam = Adam::new(0.01);
        for k in 0..25 {
            let g = Tensor::from_f64(&[3], &[(k as f64).sin(), 0.3, -1.0 / (k as f64 + 1.0)]).unwrap();
            adam.update(&mut store, &[Some(g)]).unwrap();
        }
        store
    };
    assert_eq!(run(), run());
}

#[test]
fn separable_set_is_learned_by_every_model() {
    let data = separable(20);
    for kind in [ModelKind::Caps, ModelKind::Lstm, ModelKind::Att] {
        let out = train(&small(kind), &data, &data).unwrap();
        let acc = evaluate(&out.model, &data).unwrap().metric;
        assert_eq!(acc, 1.0, "{kind}");
    }
}

#[test]
fn one_adam_step_reduces_first_batch_loss() {
    let data = separable(20);
    for kind in [ModelKind::Caps, ModelKind::Lstm, ModelKind::Att] {
        let cfg = RunConfig { lr: 1e-3, dropout: 0.0, ..small(kind) };
        let mut model = Model::<f64>::new(&cfg, 4, 2, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        model.set_scaler(&capsaudio::features::fit_scaler(&data.features).unwrap()).unwrap();
        let prepared = Prepared::new(&data, &model.scaler(), cfg.t_fix).unwrap();
        let idx: Vec<usize> = (0..8).collect();
        let loss_of = |m: &Model<f64>| {
            let mut g = Graph::new();
            let x = g.constant(prepared.inputs(&idx).unwrap());
            let bound = m.store.bind(&mut g);
            let out = m.forward_bound(&mut g, &bound, x, true, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            let loss = m.loss(&mut g, &out, &prepared.targets(&idx).unwrap(), None, LabelMode::Single).unwrap();
            let grads = g.backward(loss).unwrap();
            let per_param: Vec<_> = bound.vars().iter().map(|&v| grads.get(v).cloned()).collect();
            (g.value(loss).item(), per_param)
        };
        let (before, grads) = loss_of(&model);
        Adam::new(cfg.lr).update(&mut model.store, &grads).unwrap();
        let (after, _) = loss_of(&model);
        assert!(after < before, "{kind}: {before} -> {after}");
    }
}

#[test]
fn identical_runs_give_identical_checkpoints_and_metrics() {
    let data = separable(12);
    let cfg = RunConfig { epochs: 4, use_decoder: true, ..small(ModelKind::Caps) };
    let a = train(&cfg, &data, &data).unwrap();
    let b = train(&cfg, &data, &data).unwrap();
    assert!(a.metrics.same_results(&b.metrics));
    let names = data.class_names.clone();
    assert_eq!(a.model.to_checkpoint(&names).to_bytes(), b.model.to_checkpoint(&names).to_bytes());
}

#[test]
fn checkpoint_round_trip_preserves_accuracy() {
    let data = separable(12);
    let out = train(&RunConfig { epochs: 3, ..small(ModelKind::Att) }, &data, &data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    out.model.to_checkpoint(&data.class_names).save(&path).unwrap();
    let (back, classes) = Model::<f64>::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(classes, data.class_names);
    assert_eq!(evaluate(&back, &data).unwrap(), evaluate(&out.model, &data).unwrap());
}

#[test]
fn multi_label_training_runs_for_both_heads() {
    let mut data = separable(12);
    data.class_names.push("extra".into());
    for (i, l) in data.labels.iter_mut().enumerate() {
        if i % 3 == 0 {
            l.insert(2);
        }
    }
    for kind in [ModelKind::Caps, ModelKind::Att] {
        let cfg = RunConfig { mode: LabelMode::Multi, lambda: 1.0, epochs: 3, ..small(kind) };
        let out = train(&cfg, &data, &data).unwrap();
        assert!((0.0..=1.0).contains(&out.metrics.best_metric));
        assert_eq!(out.metrics.confusion.len(), 3);
    }
}

#[test]
fn metrics_file_echoes_config() {
    let data = separable(6);
    let cfg = RunConfig { epochs: 2, ..small(ModelKind::Lstm) };
    let out = train(&cfg, &data, &data).unwrap();
    let text = out.metrics.render(&cfg, &data.class_names);
    for line in cfg.to_text().lines() {
        assert!(text.contains(&format!("# {line}\n")));
    }
    assert!(text.contains("# selection: best_test\n"));
    assert!(text.contains("epoch,train_loss,test_metric,seconds\n"));
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 3);
}
