//! Seeded Gaussian mixtures: a fast, fully known test distribution.

use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Normalization, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Isotropic Gaussian mixture in `D` dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub means: Vec<Vec<f64>>,
    /// Per-component standard deviation.
    pub scales: Vec<f64>,
    pub weights: Vec<f64>,
    pub seed: u64,
    /// Samples are clipped into `[clip_min, clip_max]` in every dimension.
    #[serde(default = "default_min")]
    pub clip_min: f64,
    #[serde(default = "default_max")]
    pub clip_max: f64,
}

fn default_min() -> f64 {
    0.0
}

fn default_max() -> f64 {
    1.0
}

impl MixtureSpec {
    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.means.len();
        if k == 0 || self.dim() == 0 {
            return Err(Error::Config(
                "mixture needs at least one component of positive dimension".into(),
            ));
        }
        if self.means.iter().any(|m| m.len() != self.dim()) {
            return Err(Error::Config("mixture means differ in dimension".into()));
        }
        if self.scales.len() != k || self.weights.len() != k {
            return Err(Error::Config(format!(
                "{k} means but {} scales and {} weights",
                self.scales.len(),
                self.weights.len()
            )));
        }
        if self.scales.iter().any(|&s| !(s >= 0.0 && s.is_finite())) {
            return Err(Error::Config(
                "mixture scales must be finite and non-negative".into(),
            ));
        }
        if self.weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::Config("mixture weights must be positive".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "mixture weights sum to {total}, not 1"
            )));
        }
        if !(self.clip_min < self.clip_max) {
            return Err(Error::Config("clip_min must be below clip_max".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: MixtureSpec =
            toml::from_str(text).map_err(|e| Error::Config(format!("mixture spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("mixture spec serializes")
    }
}

/// Draws `n` points. Point `i` depends only on the seed and on `i`, so
/// longer draws extend shorter ones.
pub fn gen_mixture(spec: &MixtureSpec, n: usize, split: Split) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument(
            "cannot draw zero mixture points".into(),
        ));
    }
    let dim = spec.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let pick = WeightedIndex::new(&spec.weights).map_err(|e| Error::Config(e.to_string()))?;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let c = pick.sample(&mut rng);
        labels.push(c as u8);
        for d in 0..dim {
            let z: f64 = rng.sample(StandardNormal);
            let v = (spec.means[c][d] + spec.scales[c] * z).clamp(spec.clip_min, spec.clip_max);
            data.push(v as f32);
        }
    }
    let examples = Tensor::new([n, dim], data)?;
    let norm = Normalization::Identity {
        min: spec.clip_min,
        max: spec.clip_max,
    };
    Dataset::new(examples, Some(labels), split, norm)
}
