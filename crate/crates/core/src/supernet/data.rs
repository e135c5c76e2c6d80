//! Synthetic 1-D classification task: class-specific sinusoids with one
//! harmonic, random phases and Gaussian noise.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_classes: usize,
    pub length: usize,
    /// Base frequency of class 0, in cycles per window.
    pub base_freq: f64,
    /// Frequency increment between consecutive classes.
    pub freq_step: f64,
    pub harmonic_amp: f64,
    pub noise_sigma: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 0,
            n_train: 4096,
            n_val: 1024,
            n_classes: 8,
            length: 32,
            base_freq: 1.0,
            freq_step: 0.5,
            harmonic_amp: 0.5,
            noise_sigma: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    /// Row-major `n x length`.
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
    pub length: usize,
    pub n_classes: usize,
    pub split: Split,
}

/// Channel-major input batch (`1 x (batch * len)`).
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub data: Vec<T>,
    pub batch: usize,
    pub len: usize,
}

impl<T: Scalar> Batch<T> {
    pub fn new(data: Vec<T>, batch: usize, len: usize) -> Self {
        assert_eq!(data.len(), batch * len);
        Batch { data, batch, len }
    }
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn example(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.length..(i + 1) * self.length]
    }

    /// Examples `indices`, subsampled by uniform striding to `resolution`.
    pub fn batch<T: Scalar>(&self, indices: &[usize], resolution: usize) -> Batch<T> {
        let mut data = Vec::with_capacity(indices.len() * resolution);
        for &i in indices {
            let x = self.example(i);
            for l in 0..resolution {
                data.push(T::lit(x[l * self.length / resolution]));
            }
        }
        Batch::new(data, indices.len(), resolution)
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn from_parts(
        inputs: Vec<f64>,
        labels: Vec<usize>,
        length: usize,
        n_classes: usize,
        split: Split,
    ) -> Result<Self> {
        if inputs.len() != labels.len() * length {
            return Err(Error::Shape(format!(
                "{} values for {} examples of length {length}",
                inputs.len(),
                labels.len()
            )));
        }
        if labels.iter().any(|&y| y >= n_classes) {
            return Err(Error::Shape("label out of range".into()));
        }
        Ok(SyntheticDataset {
            inputs,
            labels,
            length,
            n_classes,
            split,
        })
    }
}

fn generate(cfg: &DatasetConfig, n: usize, split: Split) -> SyntheticDataset {
    let stream = match split {
        Split::Train => 1,
        Split::Val => 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let mut labels: Vec<usize> = (0..n).map(|i| i % cfg.n_classes).collect();
    labels.shuffle(&mut rng);
    let noise = Normal::new(0.0, cfg.noise_sigma).expect("noise sigma must be finite and >= 0");
    let mut inputs = Vec::with_capacity(n * cfg.length);
    for &y in &labels {
        let f = cfg.base_freq + cfg.freq_step * y as f64;
        let phase: f64 = rng.random_range(0.0..2.0 * PI);
        let phase2: f64 = rng.random_range(0.0..2.0 * PI);
        for l in 0..cfg.length {
            let t = l as f64 / cfg.length as f64;
            let v = (2.0 * PI * f * t + phase).sin()
                + cfg.harmonic_amp * (2.0 * PI * 2.0 * f * t + phase2).sin()
                + noise.sample(&mut rng);
            inputs.push(v);
        }
    }
    SyntheticDataset {
        inputs,
        labels,
        length: cfg.length,
        n_classes: cfg.n_classes,
        split,
    }
}

/// Balanced train and validation splits, reproducible from `cfg.seed`.
pub fn gen_dataset(cfg: &DatasetConfig) -> Result<(SyntheticDataset, SyntheticDataset)> {
    if cfg.n_classes < 2 {
        return Err(Error::Config("dataset needs at least 2 classes".into()));
    }
    if cfg.length == 0 {
        return Err(Error::Config("dataset length must be positive".into()));
    }
    Ok((
        generate(cfg, cfg.n_train, Split::Train),
        generate(cfg, cfg.n_val, Split::Val),
    ))
}
