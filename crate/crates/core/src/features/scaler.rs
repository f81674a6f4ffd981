//! Per-dimension min-max scaling fitted on the training split.

use crate::error::{shape_err, Error, Result};
use crate::features::mfcc::FeatureMatrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct ScalerParams<T> {
    pub min: Vec<T>,
    pub max: Vec<T>,
}

impl<T: Scalar> ScalerParams<T> {
    pub fn n_dims(&self) -> usize {
        self.min.len()
    }

    /// Scales one value of dimension `d`; degenerate dimensions map to 0.
    pub fn scale(&self, d: usize, x: T) -> T {
        let range = self.max[d] - self.min[d];
        if range > T::zero() {
            (x - self.min[d]) / range
        } else {
            T::zero()
        }
    }
}

/// Pools per-dimension extrema over every frame of every matrix.
pub fn fit_scaler<T: Scalar>(train: &[FeatureMatrix<T>]) -> Result<ScalerParams<T>> {
    let first = train.first().ok_or_else(|| Error::InsufficientData("no training matrices to fit a scaler".into()))?;
    let d = first.n_dims;
    let mut min = vec![T::infinity(); d];
    let mut max = vec![T::neg_infinity(); d];
    for m in train {
        if m.n_dims != d {
            return Err(shape_err(format!("scaler fit over {} and {d} dims", m.n_dims)));
        }
        for row in m.rows() {
            for (k, &v) in row.iter().enumerate() {
                min[k] = min[k].min(v);
                max[k] = max[k].max(v);
            }
        }
    }
    if train.iter().all(|m| m.n_frames == 0) {
        return Err(Error::InsufficientData("training matrices have no frames".into()));
    }
    Ok(ScalerParams { min, max })
}

/// `(x − min) / (max − min)` per dimension, without clipping.
pub fn apply_scaler<T: Scalar>(m: &FeatureMatrix<T>, s: &ScalerParams<T>) -> Result<FeatureMatrix<T>> {
    if m.n_dims != s.n_dims() {
        return Err(shape_err(format!("matrix has {} dims, scaler {}", m.n_dims, s.n_dims())));
    }
    let data = m.data.iter().enumerate().map(|(i, &x)| s.scale(i % m.n_dims, x)).collect();
    Ok(FeatureMatrix { data, ..m.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> FeatureMatrix<f64> {
        FeatureMatrix::new(v.to_vec(), v.len(), 1).unwrap()
    }

    #[test]
    fn fit_pools_matrices() {
        let s = fit_scaler(&[col(&[1.0, 3.0, 5.0])]).unwrap();
        assert_eq!((s.min[0], s.max[0]), (1.0, 5.0));
        let s = fit_scaler(&[col(&[1.0, 3.0]), col(&[-2.0, 4.0])]).unwrap();
        assert_eq!((s.min[0], s.max[0]), (-2.0, 4.0));
        let s = fit_scaler(&[col(&[2.0, 2.0])]).unwrap();
        assert_eq!((s.min[0], s.max[0]), (2.0, 2.0));
    }

    #[test]
    fn apply_values() {
        let s = ScalerParams { min: vec![1.0], max: vec![5.0] };
        assert_eq!(apply_scaler(&col(&[3.0, 7.0]), &s).unwrap().data, vec![0.5, 1.5]);
        let flat = ScalerParams { min: vec![2.0], max: vec![2.0] };
        assert_eq!(apply_scaler(&col(&[2.0, 9.0]), &flat).unwrap().data, vec![0.0, 0.0]);
    }

    #[test]
    fn errors() {
        assert!(matches!(fit_scaler::<f64>(&[]), Err(Error::InsufficientData(_))));
        let s = ScalerParams { min: vec![0.0, 0.0], max: vec![1.0, 1.0] };
        assert!(matches!(apply_scaler(&col(&[1.0]), &s), Err(Error::Shape(_))));
    }
}
