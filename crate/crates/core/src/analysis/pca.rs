//! Principal component analysis via the symmetric eigendecomposition of the
//! sample covariance.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// Row-major, one unit-norm component per row, by decreasing variance.
    pub components: Vec<Vec<f64>>,
    /// Component variance over total variance; all zero for constant data.
    pub explained_variance_ratio: Vec<f64>,
    pub explained_variance: Vec<f64>,
}

/// Fits `n_components` principal axes to `vectors` (`n` rows of equal length).
///
/// Each component's largest-magnitude entry is made positive so results do
/// not depend on the eigensolver's sign choice.
pub fn fit_pca(vectors: &[Vec<f64>], n_components: usize) -> Result<PcaModel> {
    let n = vectors.len();
    let d = vectors.first().map_or(0, Vec::len);
    if n == 0 || d == 0 {
        return Err(Error::InsufficientData("PCA needs at least one non-empty vector".into()));
    }
    if vectors.iter().any(|v| v.len() != d) {
        return Err(shape_err("PCA vectors differ in length"));
    }
    if n_components == 0 || n_components > d {
        return Err(Error::Config(format!("{n_components} components requested for {d}-dimensional data")));
    }
    let mean: Vec<f64> = (0..d).map(|j| vectors.iter().map(|v| v[j]).sum::<f64>() / n as f64).collect();
    let centered = DMatrix::from_fn(n, d, |i, j| vectors[i][j] - mean[j]);
    let denom = (n.max(2) - 1) as f64;
    let cov = (centered.transpose() * &centered) / denom;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let variances: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k].max(0.0)).collect();
    let total: f64 = variances.iter().sum();
    let components = order[..n_components]
        .iter()
        .map(|&k| {
            let mut c: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            let pivot = c.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            if pivot < 0.0 {
                c.iter_mut().for_each(|v| *v = -*v);
            }
            c
        })
        .collect();
    let ratio = |v: f64| if total > 0.0 { v / total } else { 0.0 };
    Ok(PcaModel {
        mean,
        components,
        explained_variance_ratio: variances[..n_components].iter().map(|&v| ratio(v)).collect(),
        explained_variance: variances[..n_components].to_vec(),
    })
}

impl PcaModel {
    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn transform(&self, v: &[f64]) -> Vec<f64> {
        self.components.iter().map(|c| c.iter().zip(v).zip(&self.mean).map(|((a, x), m)| a * (x - m)).sum()).collect()
    }

    /// Maps projections back to the input space (mean included).
    pub fn inverse_transform(&self, p: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, &w) in self.components.iter().zip(p) {
            for (o, a) in out.iter_mut().zip(c) {
                *o += w * a;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn points_on_a_line() {
        let pts: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64 + 1.0]).collect();
        let m = fit_pca(&pts, 2).unwrap();
        assert!((m.explained_variance_ratio[0] - 1.0).abs() < 1e-10);
        assert!(m.explained_variance_ratio[1].abs() < 1e-10);
        let c = &m.components[0];
        assert!((c[1] / c[0] - 2.0).abs() < 1e-10 && c[1] > 0.0);
    }

    #[test]
    fn mean_projects_to_origin() {
        let pts = vec![vec![1.0, 0.0, 2.0], vec![0.0, 3.0, 1.0], vec![2.0, 1.0, 0.0], vec![1.0, 1.0, 1.0]];
        let m = fit_pca(&pts, 2).unwrap();
        assert!(m.transform(&m.mean).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn single_point_and_errors() {
        let m = fit_pca(&[vec![0.5, 0.5]], 2).unwrap();
        assert_eq!(m.transform(&[0.5, 0.5]), vec![0.0, 0.0]);
        assert_eq!(m.explained_variance_ratio, vec![0.0, 0.0]);
        assert!(fit_pca(&[], 1).is_err());
        assert!(fit_pca(&[vec![1.0]], 2).is_err());
        assert!(fit_pca(&[vec![1.0], vec![1.0, 2.0]], 1).is_err());
    }
}
