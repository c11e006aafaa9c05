//! Synthetic covariate-shift regression data.
//!
//! Inputs are uniform draws on `[0, 1)`. Only the training inputs are pushed
//! through [`perturb_input`], which concentrates them towards zero; labels are
//! noiseless evaluations of [`target`]. By default labels are computed on the
//! perturbed inputs, so train and evaluation splits share the labelling
//! function and differ only in their input distribution.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::io::{fmt_f64, CsvWriter};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Perturbation factor; smaller values shift the training inputs more.
    pub sigma2: f64,
    pub seed: u64,
    /// Label training points with `target(raw x)` instead of
    /// `target(perturbed x)`.
    #[serde(default)]
    pub label_before_perturb: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_train: 256,
            n_val: 64,
            n_test: 64,
            sigma2: 1.0,
            seed: 0,
            label_before_perturb: false,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(invalid("split sizes must be positive"));
        }
        if !(self.sigma2 > 0.0) || !self.sigma2.is_finite() {
            return Err(invalid(format!("sigma2 must be positive, got {}", self.sigma2)));
        }
        Ok(())
    }
}

/// Scalar-input regression data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: Vec<f64>,
    pub labels: Vec<f64>,
}

impl Dataset {
    pub fn new(inputs: Vec<f64>, labels: Vec<f64>) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(invalid(format!(
                "{} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        if inputs.iter().chain(&labels).any(|v| !v.is_finite()) {
            return Err(invalid("dataset entries must be finite"));
        }
        Ok(Self { inputs, labels })
    }

    /// Labels every input with [`target`].
    pub fn from_target(inputs: Vec<f64>) -> Self {
        let labels = inputs.iter().map(|&x| target(x)).collect();
        Self { inputs, labels }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    /// Training inputs before perturbation, in the same order as `train`.
    pub train_raw: Vec<f64>,
}

/// `n` i.i.d. draws from `Uniform[0, 1)` on the data stream of `seed`.
pub fn sample_inputs(n: usize, seed: u64) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(invalid("sample_inputs: n must be positive"));
    }
    let mut rng = stream_rng(seed, Stream::Data);
    Ok((0..n).map(|_| rng.random::<f64>()).collect())
}

/// `x * exp(-(1 - x)^2 / sigma2)`.
pub fn perturb_input(x: f64, sigma2: f64) -> Result<f64> {
    if !(sigma2 > 0.0) {
        return Err(invalid(format!("sigma2 must be positive, got {sigma2}")));
    }
    Ok(x * (-(1.0 - x).powi(2) / sigma2).exp())
}

/// The regression target `cos(x) * sin(x)`.
pub fn target(x: f64) -> f64 {
    x.cos() * x.sin()
}

/// Draws `n_train + n_val + n_test` inputs in one stream and assigns them in
/// that order to train, validation and test.
pub fn make_splits(config: &DataConfig) -> Result<Splits> {
    config.validate()?;
    let total = config.n_train + config.n_val + config.n_test;
    let raw = sample_inputs(total, config.seed)?;
    let (train_raw, rest) = raw.split_at(config.n_train);
    let (val_x, test_x) = rest.split_at(config.n_val);

    let train_x = train_raw
        .iter()
        .map(|&x| perturb_input(x, config.sigma2))
        .collect::<Result<Vec<_>>>()?;
    let train_y = if config.label_before_perturb {
        train_raw.iter().map(|&x| target(x)).collect()
    } else {
        train_x.iter().map(|&x| target(x)).collect()
    };

    Ok(Splits {
        train: Dataset::new(train_x, train_y)?,
        val: Dataset::from_target(val_x.to_vec()),
        test: Dataset::from_target(test_x.to_vec()),
        train_raw: train_raw.to_vec(),
    })
}

/// Writes `split,x,y` rows for all three splits.
pub fn write_splits_csv(splits: &Splits, path: &Path) -> Result<()> {
    let mut w = CsvWriter::create(path, &["split", "x", "y"])?;
    for (name, ds) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        for (x, y) in ds.inputs.iter().zip(&ds.labels) {
            w.row(&[name.to_string(), fmt_f64(*x), fmt_f64(*y)])?;
        }
    }
    w.finish()
}
