//! 2-D PCA projections of one class capsule's activity vectors across
//! augmentation levels.

use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::analysis::pca::{fit_pca, PcaModel};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::features::{AudioClip, FeatureConfig, MfccExtractor};
use crate::nn::checkpoint::Checkpoint;
use crate::training::{Head, Model};

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Activity vector of capsule `class` for every matrix.
pub fn class_activity_vectors(model: &Model<f64>, mats: &[FeatureMatrix<f64>], class: usize) -> Result<Vec<Vec<f64>>> {
    if !matches!(model.head, Head::Caps { .. }) {
        return Err(Error::Config(format!("{} model has no capsule layer", model.cfg.model)));
    }
    if class >= model.n_classes {
        return Err(Error::Config(format!("class index {class} outside {} classes", model.n_classes)));
    }
    let d = model.cfg.caps_dim;
    let mut out = Vec::with_capacity(mats.len());
    for inf in model.infer_all(mats)? {
        let caps = inf.caps.expect("capsule head yields activity vectors");
        for b in 0..caps.shape()[0] {
            let start = (b * model.n_classes + class) * d;
            out.push(caps.data()[start..start + d].to_vec());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScatterRow {
    pub level: f64,
    pub pc1: f64,
    pub pc2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScatterTable {
    pub checkpoint_sha256: String,
    pub target_class: String,
    pub pca: PcaModel,
    pub rows: Vec<ScatterRow>,
}

impl ScatterTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let ratios: Vec<String> = self.pca.explained_variance_ratio.iter().map(|r| r.to_string()).collect();
        let _ = writeln!(out, "# checkpoint_sha256: {}", self.checkpoint_sha256);
        let _ = writeln!(out, "# target_class: {}", self.target_class);
        let _ = writeln!(out, "# explained_variance_ratio: {}", ratios.join(","));
        out.push_str("level,pc1,pc2\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{}", r.level, r.pc1, r.pc2);
        }
        out
    }
}

/// Forwards every `(level, clip)` through the checkpointed model, collects
/// the `target_class` capsule, fits a 2-component PCA over the collection
/// and returns the projections labeled by level.
pub fn capsule_scatter(
    ckpt: &Checkpoint,
    clips: &[(f64, AudioClip<f64>)],
    target_class: &str,
    features: &FeatureConfig,
) -> Result<ScatterTable> {
    let (model, classes) = Model::<f64>::from_checkpoint(ckpt)?;
    let class = classes.iter().position(|c| c == target_class).ok_or_else(|| {
        Error::Config(format!("class `{target_class}` is not in the checkpoint ({})", classes.join(", ")))
    })?;
    let extractor = MfccExtractor::new(features)?;
    let mats = clips.iter().map(|(_, c)| extractor.extract(c)).collect::<Result<Vec<_>>>()?;
    let vectors = class_activity_vectors(&model, &mats, class)?;
    let pca = fit_pca(&vectors, 2)?;
    let rows = clips
        .iter()
        .zip(&vectors)
        .map(|((level, _), v)| {
            let p = pca.transform(v);
            ScatterRow { level: *level, pc1: p[0], pc2: p[1] }
        })
        .collect();
    Ok(ScatterTable { checkpoint_sha256: sha256_hex(&ckpt.to_bytes()), target_class: target_class.into(), pca, rows })
}
