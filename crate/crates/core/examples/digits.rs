//! Trains a classifier on the synthetic spoken-digit corpus.
//!
//! cargo run --release --example digits -- [key=value ...]
//! Extra keys: reps=<clips per digit and speaker>, precision=f32|f64.

use std::time::Instant;

use capsaudio::features::{DigitCorpusConfig, FeatureConfig, MfccExtractor, Split};
use capsaudio::training::{train_with, Dataset, RunConfig};
use capsaudio::{Result, Scalar};

fn load<T: Scalar>(
    dir: &std::path::Path,
    m: &capsaudio::features::DatasetManifest,
) -> Result<(Dataset<T>, Dataset<T>)> {
    let ex = MfccExtractor::<T>::new(&FeatureConfig::default())?;
    let split = |s: Split| -> Result<Dataset<T>> {
        let sub = m.subset(s)?;
        let _ = dir;
        Dataset::new(
            sub.materialize(&ex)?,
            sub.label_indices().into_iter().map(|l| l.into_iter().collect()).collect(),
            m.class_names.clone(),
        )
    };
    Ok((split(Split::Train)?, split(Split::Test)?))
}

fn run<T: Scalar>(cfg: &RunConfig, reps: usize) -> Result<()> {
    let dir = tempfile::tempdir()?;
    let corpus = DigitCorpusConfig { reps, ..Default::default() };
    let t0 = Instant::now();
    let m = capsaudio::features::write_digit_corpus(&corpus, dir.path())?;
    let (train, test) = load::<T>(dir.path(), &m)?;
    let frames: Vec<usize> = train.features.iter().map(|f| f.n_frames).collect();
    println!(
        "{} train / {} test clips, frames {}..{}, prepared in {:.1}s",
        train.len(),
        test.len(),
        frames.iter().min().unwrap(),
        frames.iter().max().unwrap(),
        t0.elapsed().as_secs_f64()
    );
    let out = train_with(cfg, &train, &test, |e| {
        println!("epoch {:>3} loss {:.4} test {:.3} ({:.1}s)", e.epoch, e.train_loss, e.test_metric, e.seconds)
    })?;
    println!("best {:.3} at epoch {}", out.metrics.best_metric, out.metrics.best_epoch);
    Ok(())
}

fn main() -> Result<()> {
    let mut cfg = RunConfig::default();
    let mut reps = 10;
    let mut f32_mode = false;
    let mut pairs = Vec::new();
    for arg in std::env::args().skip(1) {
        let (k, v) = capsaudio::training::split_pair(&arg)?;
        match k.as_str() {
            "reps" => reps = v.parse().expect("reps"),
            "precision" => f32_mode = v == "f32",
            _ => pairs.push((k, v)),
        }
    }
    cfg.apply(&pairs)?;
    if f32_mode {
        run::<f32>(&cfg, reps)
    } else {
        run::<f64>(&cfg, reps)
    }
}
