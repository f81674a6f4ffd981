//! Capsule activity vectors as extra, frame-constant input features.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::features::{read_features, write_features, FeatureMatrix};
use crate::nn::checkpoint::Checkpoint;
use crate::training::{Head, Model};

/// All class capsules of each clip, flattened to `n_classes · caps_dim`.
pub fn capsule_summaries(model: &Model<f64>, mats: &[FeatureMatrix<f64>]) -> Result<Vec<Vec<f64>>> {
    if !matches!(model.head, Head::Caps { .. }) {
        return Err(Error::Config(format!("{} model has no capsule layer", model.cfg.model)));
    }
    if let Some(m) = mats.iter().find(|m| m.n_dims != model.n_dims) {
        return Err(Error::Format(format!(
            "features have {} dims, the source model expects {}",
            m.n_dims, model.n_dims
        )));
    }
    let mut out = Vec::with_capacity(mats.len());
    for inf in model.infer_all(mats)? {
        let caps = inf.caps.expect("capsule head yields activity vectors");
        out.extend(caps.data().chunks(model.n_classes * model.cfg.caps_dim).map(<[f64]>::to_vec));
    }
    Ok(out)
}

/// Appends each clip's capsule summary to every frame of its matrix.
pub fn export_transfer_features(ckpt: &Checkpoint, mats: &[FeatureMatrix<f64>]) -> Result<Vec<FeatureMatrix<f64>>> {
    let (model, _) = Model::<f64>::from_checkpoint(ckpt)?;
    let summaries = capsule_summaries(&model, mats)?;
    Ok(mats.iter().zip(&summaries).map(|(m, s)| m.with_constant_dims(s)).collect())
}

/// Reads feature caches, appends capsule summaries and writes caches with the
/// same file names under `out_dir`.
pub fn export_transfer_files(ckpt: &Checkpoint, inputs: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mats = inputs.iter().map(read_features::<f64>).collect::<Result<Vec<_>>>()?;
    let augmented = export_transfer_features(ckpt, &mats)?;
    std::fs::create_dir_all(out_dir)?;
    inputs
        .iter()
        .zip(&augmented)
        .map(|(src, m)| {
            let name = src.file_name().ok_or_else(|| Error::MissingFile(src.clone()))?;
            let dst = out_dir.join(name);
            write_features(&dst, m)?;
            Ok(dst)
        })
        .collect()
}
