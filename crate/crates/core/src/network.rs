//! Fully connected scalar-output MLP.
//!
//! Layer `l` maps `a_{l-1}` to `sigma(W_l a_{l-1} + b_l)`; the last layer has
//! width one and no activation. Weights are stored as `out x in` matrices.
//!
//! Parameters are flattened layer-major: for each layer the weight matrix in
//! row-major order (all inputs of output unit 0, then unit 1, ...), followed by
//! the bias vector. Jacobian columns and every parameter-space vector in the
//! crate use this order.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::io::{fmt_f64, parse_f64, read_csv, CsvWriter};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// `max(0, z)`; the derivative at exactly zero is taken to be 0.
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }
}

/// How biases are drawn at initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasInit {
    #[default]
    Zero,
    /// `Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
    #[serde(default)]
    pub bias_init: BiasInit,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            input_dim: 1,
            hidden_widths: vec![4096],
            activation: Activation::Relu,
            seed: 0,
            bias_init: BiasInit::Zero,
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(invalid("input_dim must be positive"));
        }
        if self.hidden_widths.contains(&0) {
            return Err(invalid("hidden widths must be positive"));
        }
        Ok(())
    }

    /// Layer widths `n_0, ..., n_L` including input and the scalar output.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden_widths.len() + 2);
        w.push(self.input_dim);
        w.extend_from_slice(&self.hidden_widths);
        w.push(1);
        w
    }

    /// `P = sum_l (n_{l-1} + 1) n_l`.
    pub fn param_count(&self) -> usize {
        self.widths().windows(2).map(|p| (p[0] + 1) * p[1]).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Layer {
    fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpState {
    config: MlpConfig,
    layers: Vec<Layer>,
}

/// He initialization: weights `~ Normal(0, 2 / fan_in)`, biases per
/// `config.bias_init`. Draws come from the init stream of `config.seed`.
pub fn he_init(config: &MlpConfig) -> Result<MlpState> {
    config.validate()?;
    let mut rng = stream_rng(config.seed, Stream::Init);
    let widths = config.widths();
    let mut layers = Vec::with_capacity(widths.len() - 1);
    for pair in widths.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        // Row-major draw order, matching the flattening order.
        let data: Vec<f64> = (0..fan_in * fan_out).map(|_| normal.sample(&mut rng)).collect();
        let weights = DMatrix::from_row_slice(fan_out, fan_in, &data);
        let bias = match config.bias_init {
            BiasInit::Zero => DVector::zeros(fan_out),
            BiasInit::Uniform => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                DVector::from_fn(fan_out, |_, _| bound * (2.0 * rng.random::<f64>() - 1.0))
            }
        };
        layers.push(Layer { weights, bias });
    }
    Ok(MlpState {
        config: config.clone(),
        layers,
    })
}

impl MlpState {
    /// Builds a state from explicit layers. Shapes must chain from
    /// `config.input_dim` through `config.hidden_widths` to a single output.
    pub fn from_layers(config: MlpConfig, layers: Vec<Layer>) -> Result<Self> {
        config.validate()?;
        let widths = config.widths();
        if layers.len() != widths.len() - 1 {
            return Err(invalid(format!(
                "expected {} layers, got {}",
                widths.len() - 1,
                layers.len()
            )));
        }
        for (l, (layer, pair)) in layers.iter().zip(widths.windows(2)).enumerate() {
            if layer.weights.shape() != (pair[1], pair[0]) || layer.bias.len() != pair[1] {
                return Err(invalid(format!("layer {l} has inconsistent shape")));
            }
        }
        Ok(Self { config, layers })
    }

    /// All-zero parameters with the architecture of `config`.
    pub fn zeros(config: &MlpConfig) -> Result<Self> {
        let layers = config
            .widths()
            .windows(2)
            .map(|p| Layer {
                weights: DMatrix::zeros(p[1], p[0]),
                bias: DVector::zeros(p[1]),
            })
            .collect();
        Self::from_layers(config.clone(), layers)
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Flattened parameter vector.
    pub fn params(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            for r in 0..layer.weights.nrows() {
                out.extend(layer.weights.row(r).iter());
            }
            out.extend(layer.bias.iter());
        }
        DVector::from_vec(out)
    }

    pub fn set_params(&mut self, theta: &DVector<f64>) -> Result<()> {
        self.check_len(theta.len())?;
        let mut k = 0;
        for layer in &mut self.layers {
            let (rows, cols) = layer.weights.shape();
            for r in 0..rows {
                for c in 0..cols {
                    layer.weights[(r, c)] = theta[k];
                    k += 1;
                }
            }
            for b in layer.bias.iter_mut() {
                *b = theta[k];
                k += 1;
            }
        }
        Ok(())
    }

    /// `theta <- theta + scale * delta` without materializing `theta`.
    pub fn add_scaled(&mut self, delta: &DVector<f64>, scale: f64) -> Result<()> {
        self.check_len(delta.len())?;
        let mut k = 0;
        for layer in &mut self.layers {
            let (rows, cols) = layer.weights.shape();
            for r in 0..rows {
                for c in 0..cols {
                    layer.weights[(r, c)] += scale * delta[k];
                    k += 1;
                }
            }
            for b in layer.bias.iter_mut() {
                *b += scale * delta[k];
                k += 1;
            }
        }
        Ok(())
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.param_count() {
            return Err(invalid(format!(
                "parameter vector has length {len}, network has {}",
                self.param_count()
            )));
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(invalid(format!(
                "input has dimension {}, network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn check_batch(&self, inputs: &[f64]) -> Result<usize> {
        let d = self.input_dim();
        if inputs.is_empty() || !inputs.len().is_multiple_of(d) {
            return Err(invalid(format!(
                "input buffer of length {} is not a nonempty multiple of input_dim {d}",
                inputs.len()
            )));
        }
        Ok(inputs.len() / d)
    }

    /// Network output at a single point.
    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        self.check_input(x)?;
        let act = self.config.activation;
        let mut a = DVector::from_column_slice(x);
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = &layer.weights * &a + &layer.bias;
            if l < last {
                z.apply(|v| *v = act.apply(*v));
            }
            a = z;
        }
        Ok(a[0])
    }

    /// Outputs for a flat buffer of inputs (`input_dim` values per point).
    pub fn forward_batch(&self, inputs: &[f64]) -> Result<DVector<f64>> {
        let n = self.check_batch(inputs)?;
        let d = self.input_dim();
        let out = (0..n)
            .map(|i| self.forward(&inputs[i * d..(i + 1) * d]))
            .collect::<Result<Vec<_>>>()?;
        Ok(DVector::from_vec(out))
    }

    /// Gradient of the output with respect to every parameter at `x`,
    /// written into `row` (length `P`) by reverse-mode differentiation.
    pub fn gradient_into(&self, x: &[f64], row: &mut [f64]) -> Result<()> {
        self.check_input(x)?;
        self.check_len(row.len())?;
        let act = self.config.activation;
        let depth = self.layers.len();

        // Forward pass keeping pre-activations and activations.
        let mut acts: Vec<DVector<f64>> = Vec::with_capacity(depth + 1);
        let mut pre: Vec<DVector<f64>> = Vec::with_capacity(depth);
        acts.push(DVector::from_column_slice(x));
        for (l, layer) in self.layers.iter().enumerate() {
            let z = &layer.weights * &acts[l] + &layer.bias;
            let a = if l + 1 < depth { z.map(|v| act.apply(v)) } else { z.clone() };
            pre.push(z);
            acts.push(a);
        }

        let mut offsets = Vec::with_capacity(depth);
        let mut k = 0;
        for layer in &self.layers {
            offsets.push(k);
            k += layer.param_count();
        }

        let mut delta = DVector::from_element(1, 1.0);
        for l in (0..depth).rev() {
            let layer = &self.layers[l];
            let input = &acts[l];
            let (rows, cols) = layer.weights.shape();
            let off = offsets[l];
            for r in 0..rows {
                let d = delta[r];
                let base = off + r * cols;
                for c in 0..cols {
                    row[base + c] = d * input[c];
                }
            }
            let boff = off + rows * cols;
            row[boff..boff + rows].copy_from_slice(delta.as_slice());
            if l > 0 {
                let mut back = layer.weights.tr_mul(&delta);
                back.zip_apply(&pre[l - 1], |b, z| *b *= act.derivative(z));
                delta = back;
            }
        }
        Ok(())
    }

    /// Jacobian of the outputs on a batch of inputs: one row per point, one
    /// column per parameter.
    pub fn jacobian(&self, inputs: &[f64]) -> Result<DMatrix<f64>> {
        let n = self.check_batch(inputs)?;
        let d = self.input_dim();
        let p = self.param_count();
        let mut data = vec![0.0; n * p];
        for (i, row) in data.chunks_mut(p).enumerate() {
            self.gradient_into(&inputs[i * d..(i + 1) * d], row)?;
        }
        Ok(DMatrix::from_row_slice(n, p, &data))
    }

    /// Writes the flattened parameters to `dir/{stem}.csv` (single `value`
    /// column, `P` rows) and the architecture to `dir/{stem}.json`.
    pub fn save_checkpoint(&self, dir: &Path, stem: &str) -> Result<()> {
        let mut w = CsvWriter::create(&dir.join(format!("{stem}.csv")), &["value"])?;
        for v in self.params().iter() {
            w.row(&[fmt_f64(*v)])?;
        }
        w.finish()?;
        let sidecar = Checkpoint {
            config: self.config.clone(),
            param_count: self.param_count(),
        };
        let json = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::Format {
            what: "checkpoint sidecar",
            detail: e.to_string(),
        })?;
        std::fs::write(dir.join(format!("{stem}.json")), json)?;
        Ok(())
    }

    pub fn load_checkpoint(dir: &Path, stem: &str) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join(format!("{stem}.json")))?;
        let sidecar: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Format {
            what: "checkpoint sidecar",
            detail: e.to_string(),
        })?;
        let (_, rows) = read_csv(&dir.join(format!("{stem}.csv")))?;
        let values = rows
            .iter()
            .map(|r| parse_f64(&r[0], "checkpoint value"))
            .collect::<Result<Vec<_>>>()?;
        if values.len() != sidecar.param_count {
            return Err(Error::Format {
                what: "checkpoint",
                detail: format!("{} values, sidecar says {}", values.len(), sidecar.param_count),
            });
        }
        let mut state = Self::zeros(&sidecar.config)?;
        state.set_params(&DVector::from_vec(values))?;
        Ok(state)
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    config: MlpConfig,
    param_count: usize,
}

/// First-order expansion `f_0(x) + <grad f_0(x), delta_theta>`.
pub fn linearized_forward(
    state0: &MlpState,
    jac_row: &[f64],
    delta_theta: &DVector<f64>,
    x: &[f64],
) -> Result<f64> {
    let p = state0.param_count();
    if jac_row.len() != p || delta_theta.len() != p {
        return Err(invalid(format!(
            "linearization needs length-{p} gradient and step, got {} and {}",
            jac_row.len(),
            delta_theta.len()
        )));
    }
    let dot: f64 = jac_row.iter().zip(delta_theta.iter()).map(|(g, d)| g * d).sum();
    Ok(state0.forward(x)? + dot)
}
