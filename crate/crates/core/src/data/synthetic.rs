use std::f64::consts::{PI, SQRT_2};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset};
use crate::tensor::Tensor;

/// Class-conditional Gaussian blobs around smooth per-class mean images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub shape: (usize, usize, usize),
    pub seed: u64,
    /// Noise scale is `1 + difficulty`, relative to unit-variance class means.
    pub difficulty: f64,
    /// Selects an independent sample stream over the same class means, so a
    /// test set can be drawn from the same distribution as the training set.
    #[serde(default)]
    pub stream: u64,
}

impl SyntheticSpec {
    /// The same distribution with a different sample stream and size.
    pub fn test_split(&self, per_class: usize) -> SyntheticSpec {
        SyntheticSpec {
            per_class,
            stream: self.stream + 1,
            ..*self
        }
    }

    fn validate(&self) -> Result<(), DataError> {
        let (c, h, w) = self.shape;
        if self.classes == 0 || c == 0 || h == 0 || w == 0 {
            return Err(DataError::InvalidSpec("classes and image dimensions must be positive".into()));
        }
        if self.per_class < 2 {
            return Err(DataError::InvalidSpec(format!(
                "need at least 2 samples per class, got {}",
                self.per_class
            )));
        }
        if !(self.difficulty >= 0.0 && self.difficulty.is_finite()) {
            return Err(DataError::InvalidSpec(format!(
                "difficulty must be finite and >= 0, got {}",
                self.difficulty
            )));
        }
        Ok(())
    }
}

// A colour offset per channel plus an oriented sinusoidal grating whose sign
// varies by channel. Each pixel of the mean has unit variance over classes.
fn class_means(spec: &SyntheticSpec) -> Vec<Vec<f64>> {
    let (c, h, w) = spec.shape;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(0);
    (0..spec.classes)
        .map(|_| {
            let colour: Vec<f64> = (0..c).map(|_| rng.sample(StandardNormal)).collect();
            let sign: Vec<f64> = (0..c).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
            let freq = rng.random_range(1.0..3.0);
            let angle = rng.random_range(0.0..PI);
            let phase = rng.random_range(0.0..2.0 * PI);
            let (dx, dy) = (angle.cos() * freq / w as f64, angle.sin() * freq / h as f64);
            let mut mean = Vec::with_capacity(c * h * w);
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let g = SQRT_2 * (2.0 * PI * (dx * x as f64 + dy * y as f64) + phase).sin();
                        mean.push((colour[ch] + sign[ch] * g) / SQRT_2);
                    }
                }
            }
            mean
        })
        .collect()
}

/// Draws `per_class` samples of every class, in shuffled order.
pub fn synthesize_dataset(spec: &SyntheticSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    let (c, h, w) = spec.shape;
    let size = c * h * w;
    let means = class_means(spec);
    let sigma = 1.0 + spec.difficulty;
    let norm = (1.0 + sigma * sigma).sqrt().recip();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1 + spec.stream);
    let mut order: Vec<usize> = (0..spec.classes).flat_map(|k| std::iter::repeat_n(k, spec.per_class)).collect();
    order.shuffle(&mut rng);

    let mut data = Vec::with_capacity(order.len() * size);
    for &label in &order {
        for &m in &means[label] {
            let eps: f64 = rng.sample(StandardNormal);
            data.push((m + sigma * eps) * norm);
        }
    }
    let images = Tensor::new(vec![order.len(), c, h, w], data).map_err(|e| DataError::Invalid(e.to_string()))?;
    Dataset::new(images, order, spec.classes)
}
