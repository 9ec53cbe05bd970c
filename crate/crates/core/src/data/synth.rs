//! Synthetic Gaussian-blob images, used when no MNIST files are available.
//!
//! Each class has a prototype image whose interior pixels are uniform in
//! `[0, 1]` and whose outer `border` pixels are zero, so that corner triggers
//! land on background as they do on MNIST digits. Samples are the prototype
//! plus isotropic Gaussian noise, clipped to `[0, 1]`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, ImageShape};
use crate::error::{config_err, Result};
use crate::rng::stream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobsSpec {
    pub side: usize,
    pub classes: usize,
    pub border: usize,
    pub noise: f64,
    pub train: usize,
    pub test: usize,
}

impl Default for BlobsSpec {
    fn default() -> Self {
        Self {
            side: 12,
            classes: 10,
            border: 3,
            noise: 0.3,
            train: 2000,
            test: 1000,
        }
    }
}

impl BlobsSpec {
    fn check(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(config_err("blobs need at least 2 classes"));
        }
        if 2 * self.border >= self.side {
            return Err(config_err("blob border leaves no interior"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(config_err("blob noise must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn prototypes(&self, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = stream(seed, "blobs/prototypes", 0, 0);
        let s = self.side;
        (0..self.classes)
            .map(|_| {
                let mut img = vec![0.0; s * s];
                for r in self.border..s - self.border {
                    for c in self.border..s - self.border {
                        img[r * s + c] = rng.random::<f64>();
                    }
                }
                img
            })
            .collect()
    }

    fn draw(&self, protos: &[Vec<f64>], count: usize, seed: u64, label: &str) -> Result<Dataset> {
        let mut rng = stream(seed, label, 0, 0);
        let normal = Normal::new(0.0, self.noise).map_err(|e| config_err(e.to_string()))?;
        let dim = self.side * self.side;
        let mut features = Vec::with_capacity(count * dim);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let class = i % self.classes;
            features.extend(
                protos[class]
                    .iter()
                    .map(|&p| (p + normal.sample(&mut rng)).clamp(0.0, 1.0)),
            );
            labels.push(class);
        }
        Dataset::new(
            features,
            labels,
            dim,
            self.classes,
            Some(ImageShape {
                height: self.side,
                width: self.side,
            }),
        )
    }

    /// Train and test sets drawn around shared prototypes.
    pub fn generate(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        self.check()?;
        let protos = self.prototypes(seed);
        Ok((
            self.draw(&protos, self.train, seed, "blobs/train")?,
            self.draw(&protos, self.test, seed, "blobs/test")?,
        ))
    }
}
