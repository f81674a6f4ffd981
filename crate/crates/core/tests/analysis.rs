use capsaudio::analysis::{
    augment, capsule_scatter, class_activity_vectors, export_transfer_features, fit_pca, AugmentKind,
};
use capsaudio::features::{AudioClip, FeatureConfig, FeatureMatrix};
use capsaudio::training::{Model, ModelKind, RunConfig};
use capsaudio::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[test]
fn isotropic_gaussian_splits_variance_evenly() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let pts: Vec<Vec<f64>> =
        (0..10_000).map(|_| vec![rng.sample(StandardNormal), rng.sample(StandardNormal)]).collect();
    let m = fit_pca(&pts, 2).unwrap();
    // Closed-form eigenvalues of the 2×2 sample covariance.
    let n = pts.len() as f64;
    let mean = |k: usize| pts.iter().map(|p| p[k]).sum::<f64>() / n;
    let (mx, my) = (mean(0), mean(1));
    let cov =
        |a: usize, b: usize, ma: f64, mb: f64| pts.iter().map(|p| (p[a] - ma) * (p[b] - mb)).sum::<f64>() / (n - 1.0);
    let (sxx, syy, sxy) = (cov(0, 0, mx, mx), cov(1, 1, my, my), cov(0, 1, mx, my));
    let half_tr = (sxx + syy) / 2.0;
    let disc = (((sxx - syy) / 2.0).powi(2) + sxy * sxy).sqrt();
    let want = [(half_tr + disc) / (sxx + syy), (half_tr - disc) / (sxx + syy)];
    for (got, want) in m.explained_variance_ratio.iter().zip(want) {
        assert!((got - want).abs() < 1e-10);
        assert!((got - 0.5).abs() < 0.02);
    }
}

#[test]
fn full_rank_reconstruction_and_orthonormality() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pts: Vec<Vec<f64>> =
        (0..50).map(|_| (0..6).map(|k| rng.gen_range(-1.0..1.0) * (k + 1) as f64).collect()).collect();
    let m = fit_pca(&pts, 6).unwrap();
    for p in &pts {
        let back = m.inverse_transform(&m.transform(p));
        assert!(back.iter().zip(p).all(|(a, b)| (a - b).abs() < 1e-8));
    }
    for (i, a) in m.components.iter().enumerate() {
        for (j, b) in m.components.iter().enumerate() {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            assert!((dot - f64::from(u8::from(i == j))).abs() < 1e-10);
        }
        let pivot = a.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        assert!(pivot > 0.0);
    }
    let r = &m.explained_variance_ratio;
    assert!(r.windows(2).all(|w| w[0] >= w[1]));
    assert!(r.iter().sum::<f64>() <= 1.0 + 1e-12);
}

fn caps_model(classes: usize) -> Model<f64> {
    let cfg = RunConfig { model: ModelKind::Caps, hidden_size: 4, caps_dim: 16, t_fix: 20, ..Default::default() };
    Model::new(&cfg, 60, classes, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
}

fn tone(freq: f64) -> AudioClip<f64> {
    AudioClip::new(
        (0..4000).map(|i| 0.3 * (freq * i as f64 / 16_000.0 * std::f64::consts::TAU).sin()).collect(),
        16_000,
    )
    .unwrap()
}

fn names(n: usize) -> Vec<String> {
    (0..n).map(|k| format!("c{k}")).collect()
}

#[test]
fn scatter_of_one_clip_is_the_origin() {
    let ckpt = caps_model(3).to_checkpoint(&names(3));
    let t = capsule_scatter(&ckpt, &[(0.05, tone(300.0))], "c1", &FeatureConfig::default()).unwrap();
    assert_eq!(t.rows.len(), 1);
    assert_eq!((t.rows[0].pc1, t.rows[0].pc2), (0.0, 0.0));
    assert_eq!(t.checkpoint_sha256.len(), 64);
    assert!(t.to_csv().contains("level,pc1,pc2\n0.05,0,0\n"));
}

#[test]
fn identical_features_project_identically() {
    let ckpt = caps_model(3).to_checkpoint(&names(3));
    let clips = [(0.0, tone(300.0)), (1.0, tone(300.0)), (2.0, tone(900.0))];
    let t = capsule_scatter(&ckpt, &clips, "c0", &FeatureConfig::default()).unwrap();
    assert_eq!((t.rows[0].pc1, t.rows[0].pc2), (t.rows[1].pc1, t.rows[1].pc2));
    assert!(matches!(capsule_scatter(&ckpt, &clips, "nope", &FeatureConfig::default()), Err(Error::Config(_))));
}

#[test]
fn transfer_features_append_all_capsules() {
    let model = caps_model(4);
    let mats: Vec<FeatureMatrix<f64>> = [tone(200.0), tone(700.0)]
        .iter()
        .map(|c| capsaudio::features::mfcc(c, &FeatureConfig::default()).unwrap())
        .collect();
    let out = export_transfer_features(&model.to_checkpoint(&names(4)), &mats).unwrap();
    for (o, m) in out.iter().zip(&mats) {
        assert_eq!(o.n_dims, 60 + 64);
        assert_eq!(o.n_frames, m.n_frames);
        for t in 0..m.n_frames {
            assert_eq!(&o.row(t)[..60], m.row(t));
            assert_eq!(&o.row(t)[60..], &o.row(0)[60..]);
        }
    }
    let wrong = FeatureMatrix::new(vec![0.0; 10], 2, 5).unwrap();
    assert!(matches!(export_transfer_features(&model.to_checkpoint(&names(4)), &[wrong]), Err(Error::Format(_))));
}

#[test]
fn zero_capsules_append_zeros() {
    let mut model = caps_model(2);
    let w = model.store.find("caps.w").unwrap();
    let shape = model.store.get(w).shape().to_vec();
    *model.store.get_mut(w) = capsaudio::Tensor::zeros(&shape);
    let m = capsaudio::features::mfcc(&tone(500.0), &FeatureConfig::default()).unwrap();
    let out = export_transfer_features(&model.to_checkpoint(&names(2)), std::slice::from_ref(&m)).unwrap();
    assert!(out[0].row(0)[60..].iter().all(|&v| v == 0.0));
    let v = class_activity_vectors(&model, &[m], 1).unwrap();
    assert!(v[0].iter().all(|&x| x == 0.0));
}

#[test]
fn augmentation_is_pure() {
    let c = tone(440.0);
    let a = augment(&c, AugmentKind::Speed, 1.25).unwrap();
    assert_eq!(a, augment(&c, AugmentKind::Speed, 1.25).unwrap());
    assert_eq!(c, tone(440.0));
}
