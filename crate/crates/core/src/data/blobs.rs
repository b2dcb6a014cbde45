use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::{Dataset, Labels};
use crate::seed::derive_seed;

/// Gaussian class clusters in `[0,1]^dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlobFamily {
    centers: Vec<f64>,
    num_classes: usize,
    dim: usize,
}

impl BlobFamily {
    /// Centers drawn uniformly from `[0.15, 0.85]^dim`.
    pub fn new(num_classes: usize, dim: usize, seed: u64) -> Result<Self> {
        if num_classes == 0 || dim == 0 {
            return Err(Error::Precondition(
                "blobs need positive classes and dim".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xC3]));
        let centers = (0..num_classes * dim)
            .map(|_| rng.random_range(0.15..0.85))
            .collect();
        Ok(Self {
            centers,
            num_classes,
            dim,
        })
    }

    /// Same classes, every center moved by a random offset of norm `shift`.
    /// Used as the feature-shifted second domain in the variant-data scenario.
    pub fn shifted(&self, shift: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5F]));
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut centers = self.centers.clone();
        for c in centers.chunks_mut(self.dim) {
            let dir: Vec<f64> = (0..self.dim).map(|_| normal.sample(&mut rng)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            for (x, d) in c.iter_mut().zip(dir) {
                *x = (*x + shift * d / norm).clamp(0.0, 1.0);
            }
        }
        Self {
            centers,
            num_classes: self.num_classes,
            dim: self.dim,
        }
    }

    pub fn center(&self, class: usize) -> &[f64] {
        &self.centers[class * self.dim..(class + 1) * self.dim]
    }

    /// Class-major samples `center + N(0, spread²)`, clipped to `[0,1]`.
    pub fn sample(&self, samples_per_class: usize, spread: f64, seed: u64) -> Result<Dataset> {
        if samples_per_class == 0 {
            return Err(Error::Precondition(
                "samples_per_class must be positive".into(),
            ));
        }
        if !(spread >= 0.0) {
            return Err(Error::Precondition("spread must be >= 0".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5A]));
        let normal = Normal::new(0.0, 1.0).unwrap();
        let n = self.num_classes * samples_per_class;
        let mut features = Vec::with_capacity(n * self.dim);
        let mut labels = Vec::with_capacity(n);
        for c in 0..self.num_classes {
            for _ in 0..samples_per_class {
                for &m in self.center(c) {
                    let v: f64 = normal.sample(&mut rng);
                    features.push((m + spread * v).clamp(0.0, 1.0));
                }
                labels.push(c);
            }
        }
        Dataset::new(features, self.dim, Labels::Hard(labels), self.num_classes)
    }
}

pub fn make_blobs(
    num_classes: usize,
    dim: usize,
    samples_per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    BlobFamily::new(num_classes, dim, seed)?.sample(samples_per_class, spread, seed)
}
