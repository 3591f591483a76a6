//! Datasets: MNIST-style IDX files, seeded Gaussian mixtures, and image
//! grid output.

mod grid;
mod idx;
mod mixture;

pub use grid::{quantize, render_grid, write_image_grid, Grid, SEPARATOR};
pub use idx::{
    encode_idx, load_idx, parse_idx, read_idx, write_idx, IdxArray, IMAGES_MAGIC, LABELS_MAGIC,
};
pub use mixture::{gen_mixture, MixtureSpec};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// How stored values map to model inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Normalization {
    /// Bytes `0..=255` scaled linearly onto `[0, 1]`.
    UnitByte,
    /// Values used as-is, known to lie in `[min, max]`.
    Identity { min: f64, max: f64 },
}

impl Normalization {
    pub const UNIT_BYTE: Normalization = Normalization::UnitByte;

    pub fn normalize(&self, byte: u8) -> f32 {
        byte as f32 / 255.0
    }
}

/// Examples stacked along a leading axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    examples: Tensor<f32>,
    labels: Option<Vec<u8>>,
    split: Split,
    normalization: Normalization,
}

impl Dataset {
    pub fn new(
        examples: Tensor<f32>,
        labels: Option<Vec<u8>>,
        split: Split,
        normalization: Normalization,
    ) -> Result<Self> {
        if examples.shape().len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "dataset needs a leading example axis, got shape {:?}",
                examples.shape()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != examples.shape()[0] {
                return Err(Error::InvalidArgument(format!(
                    "{} labels for {} examples",
                    l.len(),
                    examples.shape()[0]
                )));
            }
        }
        Ok(Dataset {
            examples,
            labels,
            split,
            normalization,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn example_shape(&self) -> &[usize] {
        &self.examples.shape()[1..]
    }

    pub fn examples(&self) -> &Tensor<f32> {
        &self.examples
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    pub fn example(&self, index: usize) -> Tensor<f32> {
        self.examples.slice_outer(index)
    }

    /// Gathers the given examples into a `[len, ...]` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let inner: usize = self.example_shape().iter().product();
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!(
                    "example {i} of {}",
                    self.len()
                )));
            }
            data.extend_from_slice(&self.examples.data()[i * inner..(i + 1) * inner]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.example_shape());
        Tensor::new(shape, data)
    }

    /// A batch of `size` examples drawn uniformly with replacement.
    pub fn sample_batch<R: Rng>(&self, size: usize, rng: &mut R) -> Result<Tensor<f32>> {
        let idx: Vec<usize> = (0..size).map(|_| rng.random_range(0..self.len())).collect();
        self.batch(&idx)
    }

    /// The first `n` examples (or all, if fewer).
    pub fn head(&self, n: usize) -> Result<Dataset> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        Dataset::new(
            self.batch(&idx)?,
            self.labels.as_ref().map(|l| l[..idx.len()].to_vec()),
            self.split,
            self.normalization,
        )
    }
}
