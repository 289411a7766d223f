use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// One unit-length row per kept component, strongest first.
    pub components: Vec<Vec<f64>>,
    pub explained_variance_ratio: Vec<f64>,
    /// Set when the data has no variance at all.
    pub degenerate: bool,
}

impl PcaModel {
    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn cumulative_ratio(&self) -> f64 {
        self.explained_variance_ratio.iter().sum()
    }

    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(x.iter().zip(&self.mean)).map(|(w, (v, m))| w * (v - m)).sum())
            .collect()
    }

    pub fn inverse_transform(&self, z: &[f64]) -> Vec<f64> {
        let mut x = self.mean.clone();
        for (c, zi) in self.components.iter().zip(z) {
            for (xv, w) in x.iter_mut().zip(c) {
                *xv += zi * w;
            }
        }
        x
    }
}

/// Fits PCA keeping the fewest components whose explained variance reaches
/// `variance_target`.
pub fn fit_pca(features: &[Vec<f64>], variance_target: f64) -> Result<PcaModel> {
    let n = features.len();
    if n < 2 {
        return Err(Error::precondition(format!("PCA needs at least 2 rows, got {n}")));
    }
    if !(variance_target > 0.0 && variance_target <= 1.0) {
        return Err(Error::precondition(format!("variance target must be in (0, 1], got {variance_target}")));
    }
    let dim = features[0].len();
    if dim == 0 || features.iter().any(|r| r.len() != dim) {
        return Err(Error::shape("PCA rows must share a non-zero length"));
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("PCA input".into()));
    }
    let mut mean = vec![0.0; dim];
    for r in features {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, dim, |i, j| features[i][j] - mean[j]);
    let cov = (centered.transpose() * &centered) / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let total: f64 = values.iter().sum();
    let vector = |i: usize| -> Vec<f64> {
        let mut v: Vec<f64> = eig.eigenvectors.column(order[i]).iter().copied().collect();
        // sign convention: largest-magnitude entry positive
        let lead = v.iter().copied().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        v
    };
    if total <= f64::EPSILON * dim as f64 {
        return Ok(PcaModel {
            mean,
            components: vec![vector(0)],
            explained_variance_ratio: vec![1.0],
            degenerate: true,
        });
    }
    let mut kept = 0;
    let mut cum = 0.0;
    let mut ratios = Vec::new();
    while kept < dim {
        let r = values[kept] / total;
        ratios.push(r);
        cum += r;
        kept += 1;
        if cum >= variance_target - 1e-12 {
            break;
        }
    }
    Ok(PcaModel {
        mean,
        components: (0..kept).map(vector).collect(),
        explained_variance_ratio: ratios,
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn plane_data_needs_two_components() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|_| {
                let (a, b): (f64, f64) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                vec![a, b, 2.0 * a - b]
            })
            .collect();
        let p = fit_pca(&rows, 0.95).unwrap();
        assert!(p.n_components() <= 2);
        let p = fit_pca(&rows, 1.0).unwrap();
        assert_eq!(p.n_components(), 2);
        assert!((p.cumulative_ratio() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn constant_data_is_degenerate() {
        let rows = vec![vec![1.0, 2.0]; 5];
        let p = fit_pca(&rows, 0.95).unwrap();
        assert!(p.degenerate);
        assert_eq!(p.explained_variance_ratio, vec![1.0]);
    }

    #[test]
    fn components_orthonormal_and_mean_maps_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rows: Vec<Vec<f64>> = (0..60).map(|_| (0..6).map(|j| rng.random::<f64>() * (j + 1) as f64).collect()).collect();
        let p = fit_pca(&rows, 0.95).unwrap();
        for (i, a) in p.components.iter().enumerate() {
            for (j, b) in p.components.iter().enumerate() {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                assert!((dot - f64::from(u8::from(i == j))).abs() < 1e-9);
            }
        }
        assert!(p.transform(&p.mean).iter().all(|v| v.abs() < 1e-12));
        assert!(p.cumulative_ratio() >= 0.95);
        assert!(p.explained_variance_ratio.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn rejects_too_few_rows() {
        assert!(fit_pca(&[vec![1.0]], 0.95).is_err());
    }
}
