use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::FeatureMatrix;
use crate::error::{Error, Result};
use crate::tensor::{orthonormalize_columns, Mat};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SyntheticKind {
    /// Unit-norm points in `k` mutually orthogonal `rank`-dimensional
    /// subspaces of `R^D`.
    OrthogonalSubspaces { rank: usize },
    /// Isotropic blobs of standard deviation `sigma` whose means sit on a
    /// circle in the first two coordinates, adjacent means `8σ` apart.
    GaussianBlobs { sigma: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub k: usize,
    pub dim: usize,
    pub per_cluster: usize,
    /// Std of isotropic noise added before re-normalization (subspaces only).
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn subspaces(k: usize, rank: usize, dim: usize, per_cluster: usize, noise: f64, seed: u64) -> Self {
        SyntheticSpec {
            kind: SyntheticKind::OrthogonalSubspaces { rank },
            k,
            dim,
            per_cluster,
            noise,
            seed,
        }
    }

    pub fn blobs(k: usize, dim: usize, per_cluster: usize, sigma: f64, seed: u64) -> Self {
        SyntheticSpec {
            kind: SyntheticKind::GaussianBlobs { sigma },
            k,
            dim,
            per_cluster,
            noise: 0.0,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.k == 0 || self.dim == 0 || self.per_cluster == 0 {
            return Err(Error::param("k, dimension and points per cluster must be positive"));
        }
        if !self.noise.is_finite() || self.noise < 0.0 {
            return Err(Error::param(format!("noise must be non-negative, got {}", self.noise)));
        }
        match self.kind {
            SyntheticKind::OrthogonalSubspaces { rank } => {
                if rank == 0 || rank * self.k > self.dim {
                    return Err(Error::param(format!(
                        "{} subspaces of rank {rank} do not fit in dimension {}",
                        self.k, self.dim
                    )));
                }
            }
            SyntheticKind::GaussianBlobs { sigma } => {
                if !sigma.is_finite() || sigma <= 0.0 {
                    return Err(Error::param(format!("blob sigma must be positive, got {sigma}")));
                }
                if self.dim < 2 {
                    return Err(Error::param("blobs need at least 2 dimensions"));
                }
            }
        }
        Ok(())
    }
}

/// Points are emitted cluster by cluster; labels are `0..k`.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<FeatureMatrix> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut normal = move || -> f64 { StandardNormal.sample(&mut rng) };
    let n = spec.k * spec.per_cluster;
    let mut x = Mat::zeros(n, spec.dim);
    let labels: Vec<usize> = (0..n).map(|i| i / spec.per_cluster).collect();
    match spec.kind {
        SyntheticKind::OrthogonalSubspaces { rank } => {
            let g = Mat::from_fn(spec.dim, rank * spec.k, |_, _| normal());
            let basis = orthonormalize_columns(&g)?;
            for (i, &c) in labels.iter().enumerate() {
                let mut coef: Vec<f64> = (0..rank).map(|_| normal()).collect();
                let norm = coef.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                coef.iter_mut().for_each(|v| *v /= norm);
                let row = x.row_mut(i);
                for (a, coef_a) in coef.iter().enumerate() {
                    let col = c * rank + a;
                    for (j, v) in row.iter_mut().enumerate() {
                        *v += coef_a * basis[(j, col)];
                    }
                }
                if spec.noise > 0.0 {
                    row.iter_mut().for_each(|v| *v += spec.noise * normal());
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    row.iter_mut().for_each(|v| *v /= norm);
                }
            }
        }
        SyntheticKind::GaussianBlobs { sigma } => {
            let radius = if spec.k == 1 { 0.0 } else { 4.0 * sigma / (PI / spec.k as f64).sin() };
            for (i, &c) in labels.iter().enumerate() {
                let angle = 2.0 * PI * c as f64 / spec.k as f64;
                let row = x.row_mut(i);
                for v in row.iter_mut() {
                    *v = sigma * normal();
                }
                row[0] += radius * angle.cos();
                row[1] += radius * angle.sin();
            }
        }
    }
    FeatureMatrix::new(x, Some(labels))
}
