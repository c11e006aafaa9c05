//! Experiment configuration: a flat TOML table whose keys can each be
//! overridden by a same-named command-line flag.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use modngd::datasets::DataConfig;
use modngd::dynamics::{Algorithm, TrainConfig};
use modngd::network::{Activation, BiasInit, MlpConfig};
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::CliError;

/// Environment variable giving the default output directory.
pub const OUT_ENV: &str = "MODNGD_OUT";

/// Every config key with a one-line description, in documentation order.
pub const KEYS: &[(&str, &str)] = &[
    ("n_train", "training points"),
    ("n_val", "validation points (criterion population)"),
    ("n_test", "test points"),
    ("label_before_perturb", "label training points before perturbing them"),
    ("width", "hidden units per layer"),
    ("depth", "number of hidden layers"),
    ("activation", "relu or tanh"),
    ("bias_init", "zero or uniform"),
    ("eta", "initial learning rate"),
    ("epochs", "full-batch epochs per run"),
    ("lr_halving_period", "epochs between learning-rate halvings (0 = never)"),
    ("sigma0", "output-noise scale, or \"auto\" for 1/sqrt(n_train)"),
    ("refresh_spectrum", "recompute the Jacobian SVD every epoch"),
    ("linearized", "train the linearization around the initial parameters"),
    ("rank_tol", "relative eigenvalue threshold for the NTK range"),
    ("strict_rank", "fail instead of truncating a singular NTK"),
    ("alpha_floor_rel", "criterion floor on |alpha^T u_i| relative to |alpha|"),
    ("force_all_cut", "cut every mode in every run"),
    ("sigma2", "perturbation factors (number or list)"),
    ("seeds", "seeds (integer, list, or inclusive range \"a..b\")"),
    ("algorithms", "subset of modified_ngd, ngd, cut_smallest"),
    ("out_dir", "output directory"),
    ("modes_every", "write per-mode statistics every k epochs (0 = never)"),
    ("final_window", "epochs averaged for the final test error"),
    ("jobs", "concurrent sweep cells"),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub label_before_perturb: bool,
    pub width: usize,
    pub depth: usize,
    pub activation: Activation,
    pub bias_init: BiasInit,
    pub eta: f64,
    pub epochs: usize,
    pub lr_halving_period: usize,
    #[serde(deserialize_with = "sigma0_de", serialize_with = "sigma0_ser")]
    pub sigma0: Option<f64>,
    pub refresh_spectrum: bool,
    pub linearized: bool,
    pub rank_tol: f64,
    pub strict_rank: bool,
    pub alpha_floor_rel: f64,
    pub force_all_cut: bool,
    #[serde(deserialize_with = "sigma2_de")]
    pub sigma2: Vec<f64>,
    #[serde(deserialize_with = "seeds_de")]
    pub seeds: Vec<u64>,
    pub algorithms: Vec<Algorithm>,
    pub out_dir: PathBuf,
    pub modes_every: usize,
    pub final_window: usize,
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            n_train: 256,
            n_val: 64,
            n_test: 64,
            label_before_perturb: false,
            width: 4096,
            depth: 1,
            activation: Activation::Relu,
            bias_init: BiasInit::Uniform,
            eta: train.eta,
            epochs: train.epochs,
            lr_halving_period: train.lr_halving_period,
            sigma0: None,
            refresh_spectrum: train.refresh_spectrum,
            linearized: train.linearized,
            rank_tol: train.rank_tol,
            strict_rank: train.strict_rank,
            alpha_floor_rel: train.alpha_floor_rel,
            force_all_cut: false,
            sigma2: vec![10.0, 5.0, 1.5, 1.0],
            seeds: (0..20).collect(),
            algorithms: vec![Algorithm::ModifiedNgd, Algorithm::Ngd],
            out_dir: std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs")),
            modes_every: 0,
            final_window: 10,
            jobs: 1,
        }
    }
}

fn sigma0_de<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Word(String),
    }
    match Raw::deserialize(d)? {
        Raw::Num(v) => Ok(Some(v)),
        Raw::Word(w) if w == "auto" => Ok(None),
        Raw::Word(w) => Err(serde::de::Error::custom(format!("expected a number or \"auto\", got \"{w}\""))),
    }
}

fn sigma0_ser<S: serde::Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
    match v {
        Some(x) => s.serialize_f64(*x),
        None => s.serialize_str("auto"),
    }
}

fn sigma2_de<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        One(f64),
        Many(Vec<f64>),
    }
    Ok(match Raw::deserialize(d)? {
        Raw::One(v) => vec![v],
        Raw::Many(v) => v,
    })
}

fn seeds_de<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        One(u64),
        Many(Vec<u64>),
        Range(String),
    }
    match Raw::deserialize(d)? {
        Raw::One(v) => Ok(vec![v]),
        Raw::Many(v) => Ok(v),
        Raw::Range(s) => parse_seed_range(&s).map_err(serde::de::Error::custom),
    }
}

/// Parses an inclusive range `a..b`.
pub fn parse_seed_range(s: &str) -> Result<Vec<u64>, String> {
    let (a, b) = s.split_once("..").ok_or_else(|| format!("expected \"a..b\", got \"{s}\""))?;
    let a: u64 = a.trim().parse().map_err(|_| format!("bad range start in \"{s}\""))?;
    let b: u64 = b.trim().parse().map_err(|_| format!("bad range end in \"{s}\""))?;
    if b < a {
        return Err(format!("empty range \"{s}\""));
    }
    Ok((a..=b).collect())
}

fn parse_toml_value(raw: &str) -> Option<toml::Value> {
    toml::from_str::<toml::Table>(&format!("v = {raw}")).ok().and_then(|mut t| t.remove("v"))
}

/// Interprets a flag value as a TOML value. Otherwise, a bracketed or
/// comma-separated value becomes a list of items parsed the same way, and
/// anything else is a bare string.
pub fn parse_flag_value(raw: &str) -> toml::Value {
    if let Some(v) = parse_toml_value(raw) {
        return v;
    }
    let trimmed = raw.trim();
    let inner = trimmed.strip_prefix('[').and_then(|s| s.strip_suffix(']'));
    if inner.is_some() || trimmed.contains(',') {
        let items = inner.unwrap_or(trimmed);
        return toml::Value::Array(
            items
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| parse_toml_value(s).unwrap_or_else(|| toml::Value::String(s.to_string())))
                .collect(),
        );
    }
    toml::Value::String(raw.to_string())
}

fn config_error(key: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{key}: {msg}"))
}

impl ExperimentConfig {
    /// Reads an optional TOML file, applies `(key, raw value)` overrides and
    /// validates the result.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| CliError::Config(format!("{}: {}", p.display(), e.message())))?
            }
            None => toml::Table::new(),
        };
        for (k, v) in overrides {
            table.insert(k.clone(), parse_flag_value(v));
        }
        Self::from_table(table)
    }

    pub fn from_table(table: toml::Table) -> Result<Self, CliError> {
        let cfg: Self = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
            let path = e.path().to_string();
            config_error(if path == "." { "config" } else { &path }, e.into_inner())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        for (key, v) in [("n_train", self.n_train), ("n_val", self.n_val), ("n_test", self.n_test)] {
            if v == 0 {
                return Err(config_error(key, "must be positive"));
            }
        }
        for (key, v) in [("width", self.width), ("depth", self.depth), ("epochs", self.epochs)] {
            if v == 0 {
                return Err(config_error(key, "must be positive"));
            }
        }
        if self.final_window == 0 {
            return Err(config_error("final_window", "must be positive"));
        }
        if self.jobs == 0 {
            return Err(config_error("jobs", "must be positive"));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(config_error("eta", format!("must be positive, got {}", self.eta)));
        }
        if let Some(s) = self.sigma0 {
            if !(s > 0.0 && s.is_finite()) {
                return Err(config_error("sigma0", format!("must be positive, got {s}")));
            }
        }
        if !(self.rank_tol >= 0.0) {
            return Err(config_error("rank_tol", "must be nonnegative"));
        }
        if self.sigma2.is_empty() {
            return Err(config_error("sigma2", "must not be empty"));
        }
        if let Some(s) = self.sigma2.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(config_error("sigma2", format!("must be positive, got {s}")));
        }
        if self.seeds.is_empty() {
            return Err(config_error("seeds", "must not be empty"));
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return Err(config_error("seeds", "contains duplicates"));
        }
        if self.sigma2.iter().map(|s| s.to_bits()).collect::<BTreeSet<_>>().len() != self.sigma2.len() {
            return Err(config_error("sigma2", "contains duplicates"));
        }
        if self.algorithms.is_empty() {
            return Err(config_error("algorithms", "must not be empty"));
        }
        if self.algorithms.iter().collect::<BTreeSet<_>>().len() != self.algorithms.len() {
            return Err(config_error("algorithms", "contains duplicates"));
        }
        Ok(())
    }

    pub fn data_config(&self, sigma2: f64, seed: u64) -> DataConfig {
        DataConfig {
            n_train: self.n_train,
            n_val: self.n_val,
            n_test: self.n_test,
            sigma2,
            seed,
            label_before_perturb: self.label_before_perturb,
        }
    }

    pub fn net_config(&self, seed: u64) -> MlpConfig {
        MlpConfig {
            input_dim: 1,
            hidden_widths: vec![self.width; self.depth],
            activation: self.activation,
            seed,
            bias_init: self.bias_init,
        }
    }

    pub fn train_config(&self, algorithm: Algorithm) -> TrainConfig {
        TrainConfig {
            eta: self.eta,
            epochs: self.epochs,
            lr_halving_period: self.lr_halving_period,
            sigma0: self.sigma0,
            algorithm,
            refresh_spectrum: self.refresh_spectrum,
            linearized: self.linearized,
            rank_tol: self.rank_tol,
            strict_rank: self.strict_rank,
            alpha_floor_rel: self.alpha_floor_rel,
        }
    }

    /// Algorithms in execution order: the cut-count trace of modified NGD
    /// feeds the cut-smallest baseline, so it runs first.
    pub fn ordered_algorithms(&self) -> Vec<Algorithm> {
        let mut a = self.algorithms.clone();
        a.sort();
        a
    }
}
