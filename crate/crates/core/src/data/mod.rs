//! Datasets, client partitioning, and the data-poisoning synthesizer.

mod idx;
mod partition;
mod poison;
mod synth;

pub use idx::{load_mnist, parse_idx, write_idx, IdxArray, MNIST_DIR_ENV};
pub use partition::{partition, PartitionMode, PartitionSpec};
pub use poison::{
    embed_trigger, flip_labels, make_edge_case, poison_count, stamp_pixels, EdgeCaseParams,
    LabelFlipMode, PoisonKind, PoisonSpec, Trigger, DBA_PARTS,
};
pub use synth::BlobsSpec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
}

/// Row-major feature matrix with labels. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub dim: usize,
    pub classes: usize,
    pub image: Option<ImageShape>,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<usize>,
        dim: usize,
        classes: usize,
        image: Option<ImageShape>,
    ) -> Result<Self> {
        let ds = Self {
            features,
            labels,
            dim,
            classes,
            image,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.len() != self.labels.len() * self.dim {
            return Err(Error::Dimension {
                expected: self.labels.len() * self.dim,
                found: self.features.len(),
            });
        }
        if let Some(img) = self.image {
            if img.height * img.width != self.dim {
                return Err(Error::Config(format!(
                    "image shape {}x{} does not match feature dim {}",
                    img.height, img.width, self.dim
                )));
            }
        }
        if self.labels.iter().any(|&l| l >= self.classes) {
            return Err(Error::Config("label out of range".into()));
        }
        if self.features.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("dataset features"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        Batch {
            features,
            labels,
            dim: self.dim,
            image: self.image,
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let b = self.batch(indices);
        Dataset {
            features: b.features,
            labels: b.labels,
            dim: self.dim,
            classes: self.classes,
            image: self.image,
        }
    }

    pub fn all(&self) -> Batch {
        Batch {
            features: self.features.clone(),
            labels: self.labels.clone(),
            dim: self.dim,
            image: self.image,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// Concatenation; both sides must share dim and class count.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.dim != other.dim || self.classes != other.classes {
            return Err(Error::Config("cannot concatenate mismatched datasets".into()));
        }
        let mut features = self.features.clone();
        features.extend_from_slice(&other.features);
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Ok(Dataset {
            features,
            labels,
            dim: self.dim,
            classes: self.classes,
            image: self.image,
        })
    }
}

/// A mini-batch, owned so that poisoning can rewrite it.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub dim: usize,
    pub image: Option<ImageShape>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.features[i * self.dim..(i + 1) * self.dim]
    }
}
