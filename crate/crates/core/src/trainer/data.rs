//! Seeded synthetic classification datasets.

use std::f64::consts::TAU;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// Isotropic Gaussians whose means sit on the unit circle of the first
    /// two coordinates; the other coordinates are pure noise.
    GaussianMixture,
    /// Concentric rings of radius `1 + class` in the first two coordinates.
    Rings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub kind: DatasetKind,
    pub classes: usize,
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    pub dim: usize,
    /// Noise scale; larger values mean more class overlap.
    pub overlap: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::GaussianMixture,
            classes: 3,
            n_train: 1500,
            n_validation: 1500,
            n_test: 3000,
            dim: 10,
            overlap: 0.6,
            seed: 1,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(invalid("dataset needs at least 2 classes"));
        }
        if self.dim < 2 {
            return Err(invalid("dataset dimension must be at least 2"));
        }
        if self.n_train == 0 || self.n_validation == 0 || self.n_test == 0 {
            return Err(invalid("every split needs at least one sample"));
        }
        if !(self.overlap.is_finite() && self.overlap >= 0.0) {
            return Err(invalid(format!("overlap must be >= 0, got {}", self.overlap)));
        }
        Ok(())
    }
}

/// Row-major features with one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub dim: usize,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub train: FeatureSet,
    pub validation: FeatureSet,
    pub test: FeatureSet,
}

fn sample_split(spec: &SyntheticSpec, n: usize, rng: &mut ChaCha8Rng) -> FeatureSet {
    let mut labels: Vec<usize> = (0..n).map(|i| i % spec.classes).collect();
    labels.shuffle(rng);
    let mut features = Vec::with_capacity(n * spec.dim);
    for &label in &labels {
        let (cx, cy) = match spec.kind {
            DatasetKind::GaussianMixture => {
                let angle = TAU * label as f64 / spec.classes as f64;
                (angle.cos(), angle.sin())
            }
            DatasetKind::Rings => {
                let angle = rng.random_range(0.0..TAU);
                let radius = 1.0 + label as f64;
                (radius * angle.cos(), radius * angle.sin())
            }
        };
        for d in 0..spec.dim {
            let noise: f64 = StandardNormal.sample(rng);
            let center = match d {
                0 => cx,
                1 => cy,
                _ => 0.0,
            };
            features.push(center + spec.overlap * noise);
        }
    }
    FeatureSet {
        features,
        labels,
        dim: spec.dim,
    }
}

/// Draws the train, validation and test splits from one seeded stream.
/// Labels within each split are balanced to within one sample per class.
pub fn generate_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let train = sample_split(spec, spec.n_train, &mut rng);
    let validation = sample_split(spec, spec.n_validation, &mut rng);
    let test = sample_split(spec, spec.n_test, &mut rng);
    Ok(Dataset {
        classes: spec.classes,
        train,
        validation,
        test,
    })
}
