//! Training dynamics of (modified) natural gradient descent.
//!
//! Two views are provided:
//!
//! - iterative full-batch trainers ([`train`], [`train_with`]) that apply
//!   `theta <- theta - eta_t * F_phi^+ J^T (f(X) - Y)` epoch by epoch, with the
//!   mask chosen by the cut criterion, by plain NGD (keep everything) or by
//!   the cut-smallest baseline;
//! - closed-form solutions of the linearized continuous-time flow, in which
//!   every preserved NTK eigenmode of the training residual decays as
//!   `exp(-eta N sigma0^2 t)` and every cut mode stays put.

use nalgebra::{DMatrix, DVector};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::{Dataset, Splits};
use crate::error::{invalid, Result};
use crate::io::{fmt_f64, CsvWriter};
use crate::network::{he_init, MlpConfig, MlpState};
use crate::risk::{criterion_mask, FullDiscrepancy, ModeStatistics};
use crate::spectral::{
    decompose, decompose_truncated, function_space_operator, natural_gradient_step, ModificationMask,
    SpectralDecomposition, DEFAULT_RANK_TOL,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    ModifiedNgd,
    Ngd,
    CutSmallest,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::ModifiedNgd => "modified_ngd",
            Algorithm::Ngd => "ngd",
            Algorithm::CutSmallest => "cut_smallest",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "modified_ngd" => Some(Algorithm::ModifiedNgd),
            "ngd" => Some(Algorithm::Ngd),
            "cut_smallest" => Some(Algorithm::CutSmallest),
            _ => None,
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub eta: f64,
    pub epochs: usize,
    /// The learning rate halves every this many epochs; 0 disables decay.
    pub lr_halving_period: usize,
    /// Output-noise scale. `None` uses `1 / sqrt(N)`, which makes the
    /// per-step function-space contraction `eta N sigma0^2` equal to `eta`.
    pub sigma0: Option<f64>,
    pub algorithm: Algorithm,
    /// Recompute the Jacobian and its SVD every epoch. When false the
    /// spectrum is frozen at initialization.
    pub refresh_spectrum: bool,
    /// Train the first-order expansion around the initial parameters
    /// instead of the network. Its Jacobian is constant, so the spectrum is
    /// frozen regardless of `refresh_spectrum`.
    pub linearized: bool,
    /// Relative threshold on `lambda_i^2 / lambda_1^2`.
    pub rank_tol: f64,
    /// Fail when the NTK is numerically singular instead of training on its
    /// numerical range.
    pub strict_rank: bool,
    /// Criterion floor on `|alpha^T u_i|`, relative to `||alpha||`.
    pub alpha_floor_rel: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta: 0.1,
            epochs: 500,
            lr_halving_period: 100,
            sigma0: None,
            algorithm: Algorithm::ModifiedNgd,
            refresh_spectrum: true,
            linearized: false,
            rank_tol: DEFAULT_RANK_TOL,
            strict_rank: false,
            alpha_floor_rel: 1e-12,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(invalid(format!("eta must be positive, got {}", self.eta)));
        }
        if self.epochs == 0 {
            return Err(invalid("epochs must be positive"));
        }
        if let Some(s) = self.sigma0 {
            if !(s > 0.0) || !s.is_finite() {
                return Err(invalid(format!("sigma0 must be positive, got {s}")));
            }
        }
        if !(self.rank_tol >= 0.0) {
            return Err(invalid("rank_tol must be nonnegative"));
        }
        Ok(())
    }

    pub fn sigma0_for(&self, n_train: usize) -> f64 {
        self.sigma0.unwrap_or(1.0 / (n_train as f64).sqrt())
    }

    /// Learning rate used during 0-based epoch `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.lr_halving_period == 0 {
            return self.eta;
        }
        self.eta * 0.5f64.powi((epoch / self.lr_halving_period) as i32)
    }
}

/// How the mask is chosen each epoch.
#[derive(Debug, Clone, PartialEq)]
pub enum MaskPolicy<'a> {
    /// Cut exactly the modes selected by the criterion, with the validation
    /// split as population.
    Criterion,
    PreserveAll,
    CutAll,
    /// Cut the `k` smallest modes. `k` comes from the schedule (one entry per
    /// epoch) when given, otherwise from the criterion at the same epoch.
    CutSmallest(Option<&'a [usize]>),
    /// Use this mask every epoch. Needs a frozen spectrum.
    Fixed(ModificationMask),
}

impl From<Algorithm> for MaskPolicy<'_> {
    fn from(a: Algorithm) -> Self {
        match a {
            Algorithm::ModifiedNgd => MaskPolicy::Criterion,
            Algorithm::Ngd => MaskPolicy::PreserveAll,
            Algorithm::CutSmallest => MaskPolicy::CutSmallest(None),
        }
    }
}

/// State after one epoch (losses are measured after that epoch's update).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub train_mse: f64,
    pub val_mse: f64,
    pub test_mse: f64,
    pub n_preserved: usize,
    /// Retained (numerically nonzero) modes in this epoch's decomposition.
    pub n_modes: usize,
    pub preserved: ModificationMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub records: Vec<EpochRecord>,
    pub initial_state: MlpState,
    /// Final parameters; for linearized runs these are `theta_0 + delta`.
    pub final_state: MlpState,
    pub initial_train_mse: f64,
    pub initial_test_mse: f64,
}

impl Trajectory {
    /// Mean test MSE over the last `k` epochs.
    pub fn final_test_mse(&self, k: usize) -> f64 {
        let k = k.min(self.records.len()).max(1);
        let tail = &self.records[self.records.len() - k..];
        tail.iter().map(|r| r.test_mse).sum::<f64>() / tail.len() as f64
    }

    pub fn cut_counts(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.n_modes - r.n_preserved).collect()
    }
}

pub struct EpochSnapshot<'a> {
    pub record: &'a EpochRecord,
    pub decomp: &'a SpectralDecomposition,
    pub mask: &'a ModificationMask,
    /// Present when the policy needed it or the observer asked for it.
    pub stats: Option<&'a ModeStatistics>,
}

pub trait EpochObserver {
    /// Whether [`ModeStatistics`] should be computed for 1-based `epoch`
    /// even if the mask policy does not need them.
    fn wants_statistics(&self, _epoch: usize) -> bool {
        false
    }

    fn observe(&mut self, snapshot: &EpochSnapshot<'_>) -> Result<()>;
}

/// Observer that ignores everything.
pub struct Silent;

impl EpochObserver for Silent {
    fn observe(&mut self, _: &EpochSnapshot<'_>) -> Result<()> {
        Ok(())
    }
}

/// Trains with the mask policy implied by `train_config.algorithm`.
pub fn train(splits: &Splits, net_config: &MlpConfig, train_config: &TrainConfig) -> Result<Trajectory> {
    train_with(splits, net_config, train_config, train_config.algorithm.into(), &mut Silent)
}

fn labels(ds: &Dataset) -> DVector<f64> {
    DVector::from_column_slice(&ds.labels)
}

fn mse(f: &DVector<f64>, y: &DVector<f64>) -> f64 {
    (f - y).norm_squared() / y.len() as f64
}

/// Current model, either the network itself or its linearization.
enum Model {
    Network(MlpState),
    Linearized {
        state0: MlpState,
        delta: DVector<f64>,
        f0: [DVector<f64>; 3],
        j0: [DMatrix<f64>; 3],
    },
}

impl Model {
    /// Outputs on train, val, test.
    fn outputs(&self, splits: &Splits) -> Result<[DVector<f64>; 3]> {
        match self {
            Model::Network(s) => Ok([
                s.forward_batch(&splits.train.inputs)?,
                s.forward_batch(&splits.val.inputs)?,
                s.forward_batch(&splits.test.inputs)?,
            ]),
            Model::Linearized { delta, f0, j0, .. } => Ok([
                &f0[0] + &j0[0] * delta,
                &f0[1] + &j0[1] * delta,
                &f0[2] + &j0[2] * delta,
            ]),
        }
    }

    fn step(&mut self, direction: &DVector<f64>, lr: f64) -> Result<()> {
        match self {
            Model::Network(s) => s.add_scaled(direction, -lr),
            Model::Linearized { delta, .. } => {
                delta.axpy(-lr, direction, 1.0);
                Ok(())
            }
        }
    }

    fn into_state(self) -> Result<MlpState> {
        match self {
            Model::Network(s) => Ok(s),
            Model::Linearized { mut state0, delta, .. } => {
                state0.add_scaled(&delta, 1.0)?;
                Ok(state0)
            }
        }
    }
}

/// Full-batch trainer with an explicit mask policy and an epoch observer.
pub fn train_with(
    splits: &Splits,
    net_config: &MlpConfig,
    train_config: &TrainConfig,
    policy: MaskPolicy<'_>,
    observer: &mut dyn EpochObserver,
) -> Result<Trajectory> {
    train_config.validate()?;
    let n = splits.train.len();
    if n == 0 || splits.val.is_empty() || splits.test.is_empty() {
        return Err(invalid("all splits must be nonempty"));
    }
    if let MaskPolicy::CutSmallest(Some(s)) = &policy {
        if s.len() < train_config.epochs {
            return Err(invalid(format!(
                "cut schedule has {} entries for {} epochs",
                s.len(),
                train_config.epochs
            )));
        }
    }
    let sigma0 = train_config.sigma0_for(n);
    let decompose_fn = |j: &DMatrix<f64>| {
        if train_config.strict_rank {
            decompose(j, train_config.rank_tol)
        } else {
            decompose_truncated(j, train_config.rank_tol)
        }
    };

    let state0 = he_init(net_config)?;
    let y = [labels(&splits.train), labels(&splits.val), labels(&splits.test)];

    let frozen_spectrum = train_config.linearized || !train_config.refresh_spectrum;
    let mut model = if train_config.linearized {
        let f0 = [
            state0.forward_batch(&splits.train.inputs)?,
            state0.forward_batch(&splits.val.inputs)?,
            state0.forward_batch(&splits.test.inputs)?,
        ];
        let j0 = [
            state0.jacobian(&splits.train.inputs)?,
            state0.jacobian(&splits.val.inputs)?,
            state0.jacobian(&splits.test.inputs)?,
        ];
        Model::Linearized {
            state0: state0.clone(),
            delta: DVector::zeros(state0.param_count()),
            f0,
            j0,
        }
    } else {
        Model::Network(state0.clone())
    };

    let frozen = if frozen_spectrum {
        let jt = state0.jacobian(&splits.train.inputs)?;
        let jv = state0.jacobian(&splits.val.inputs)?;
        Some((decompose_fn(&jt)?, jv))
    } else {
        None
    };
    if let MaskPolicy::Fixed(m) = &policy {
        match &frozen {
            Some((d, _)) if d.rank() == m.len() => {}
            Some((d, _)) => {
                return Err(invalid(format!("fixed mask has {} entries, spectrum has {} modes", m.len(), d.rank())))
            }
            None => return Err(invalid("a fixed mask needs a frozen spectrum")),
        }
    }

    let init_out = model.outputs(splits)?;
    let initial_train_mse = mse(&init_out[0], &y[0]);
    let initial_test_mse = mse(&init_out[2], &y[2]);

    let mut records = Vec::with_capacity(train_config.epochs);
    let mut out = init_out;
    for e in 0..train_config.epochs {
        let epoch = e + 1;
        let lr = train_config.lr_at(e);
        let residual = &out[0] - &y[0];

        let fresh;
        let (decomp, j_val) = match &frozen {
            Some((d, jv)) => (d, jv),
            None => {
                let Model::Network(s) = &model else { unreachable!() };
                fresh = (decompose_fn(&s.jacobian(&splits.train.inputs)?)?, s.jacobian(&splits.val.inputs)?);
                (&fresh.0, &fresh.1)
            }
        };

        let needs_stats = matches!(policy, MaskPolicy::Criterion | MaskPolicy::CutSmallest(None))
            || observer.wants_statistics(epoch);
        let stats = if needs_stats {
            let alpha_val = &out[1] - &y[1];
            Some(FullDiscrepancy::from_parts(decomp, &residual, &alpha_val, j_val)?.diagonal)
        } else {
            None
        };
        let criterion = |s: &ModeStatistics| {
            let floor = train_config.alpha_floor_rel * s.alpha_norm_sq.sqrt();
            criterion_mask(s, n, floor)
        };

        let mask = match &policy {
            MaskPolicy::Criterion => criterion(stats.as_ref().expect("computed"))?,
            MaskPolicy::PreserveAll => ModificationMask::all_preserved(decomp.rank()),
            MaskPolicy::CutAll => ModificationMask::all_cut(decomp.rank()),
            MaskPolicy::CutSmallest(Some(schedule)) => ModificationMask::cut_smallest(decomp.rank(), schedule[e]),
            MaskPolicy::CutSmallest(None) => {
                let k = criterion(stats.as_ref().expect("computed"))?.n_cut();
                ModificationMask::cut_smallest(decomp.rank(), k)
            }
            MaskPolicy::Fixed(m) => m.clone(),
        };

        let direction = natural_gradient_step(decomp, &mask, &residual, sigma0, n)?;
        model.step(&direction, lr)?;
        out = model.outputs(splits)?;

        let record = EpochRecord {
            epoch,
            lr,
            train_mse: mse(&out[0], &y[0]),
            val_mse: mse(&out[1], &y[1]),
            test_mse: mse(&out[2], &y[2]),
            n_preserved: mask.n_preserved(),
            n_modes: decomp.rank(),
            preserved: mask.clone(),
        };
        observer.observe(&EpochSnapshot {
            record: &record,
            decomp,
            mask: &mask,
            stats: stats.as_ref(),
        })?;
        records.push(record);
    }

    Ok(Trajectory {
        records,
        initial_state: state0,
        final_state: model.into_state()?,
        initial_train_mse,
        initial_test_mse,
    })
}

/// Writes `epoch,lr,train_mse,val_mse,test_mse,n_preserved,n_modes`.
/// Losses are mean squared errors; the optimizer itself descends on half the
/// summed squared error.
pub fn write_epochs_csv(records: &[EpochRecord], path: &Path) -> Result<()> {
    let mut w = CsvWriter::create(
        path,
        &["epoch", "lr", "train_mse", "val_mse", "test_mse", "n_preserved", "n_modes"],
    )?;
    for r in records {
        w.row(&[
            r.epoch.to_string(),
            fmt_f64(r.lr),
            fmt_f64(r.train_mse),
            fmt_f64(r.val_mse),
            fmt_f64(r.test_mse),
            r.n_preserved.to_string(),
            r.n_modes.to_string(),
        ])?;
    }
    w.finish()
}

/// Parameters of the continuous-time flow; `rate() = eta N sigma0^2` is the
/// decay rate of every preserved mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowRate {
    pub eta: f64,
    pub sigma0: f64,
    pub n_train: usize,
}

impl FlowRate {
    pub fn rate(&self) -> f64 {
        self.eta * self.n_train as f64 * self.sigma0 * self.sigma0
    }
}

fn check_mask(decomp: &SpectralDecomposition, mask: &ModificationMask) -> Result<()> {
    if mask.len() != decomp.rank() {
        return Err(invalid(format!("mask has {} entries, spectrum has {} modes", mask.len(), decomp.rank())));
    }
    Ok(())
}

/// Parameter displacement of the converged flow:
/// `V_thin diag(mask_i / lambda_i) U^T alpha_0`.
fn converged_displacement(
    decomp: &SpectralDecomposition,
    mask: &ModificationMask,
    residual0: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_mask(decomp, mask)?;
    let mut c = decomp.project(residual0)?;
    for (i, ci) in c.iter_mut().enumerate() {
        *ci = if mask.is_preserved(i) { *ci / decomp.lambda()[i] } else { 0.0 };
    }
    Ok(decomp.v_thin() * c)
}

fn gradient_row(state: &MlpState, x: &[f64]) -> Result<DVector<f64>> {
    let mut row = vec![0.0; state.param_count()];
    state.gradient_into(x, &mut row)?;
    Ok(DVector::from_vec(row))
}

/// Linearized prediction at time `t`:
/// `f_0(x) - (1 - exp(-eta N sigma0^2 t)) J(x) V_thin diag(mask/lambda) U^T alpha_0`.
pub fn closed_form_prediction(
    x: &[f64],
    t: f64,
    state0: &MlpState,
    decomp0: &SpectralDecomposition,
    mask: &ModificationMask,
    residual0: &DVector<f64>,
    flow: FlowRate,
) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(invalid(format!("time must be nonnegative, got {t}")));
    }
    let w = converged_displacement(decomp0, mask, residual0)?;
    let g = gradient_row(state0, x)?;
    Ok(state0.forward(x)? - (1.0 - (-flow.rate() * t).exp()) * g.dot(&w))
}

/// `t -> infinity` limit of [`closed_form_prediction`].
pub fn converged_prediction(
    x: &[f64],
    state0: &MlpState,
    decomp0: &SpectralDecomposition,
    mask: &ModificationMask,
    residual0: &DVector<f64>,
) -> Result<f64> {
    let w = converged_displacement(decomp0, mask, residual0)?;
    let g = gradient_row(state0, x)?;
    Ok(state0.forward(x)? - g.dot(&w))
}

/// Training outputs of the linearized flow at time `t`, using the exact
/// matrix exponential: `Y + alpha_0 - U diag(mask_i (1 - e^{-rate t})) U^T alpha_0`.
/// Cut modes (and directions outside a truncated spectrum) keep their
/// initial residual.
pub fn training_set_solution(
    t: f64,
    decomp0: &SpectralDecomposition,
    mask: &ModificationMask,
    residual0: &DVector<f64>,
    labels: &DVector<f64>,
    flow: FlowRate,
) -> Result<DVector<f64>> {
    if !(t >= 0.0) {
        return Err(invalid(format!("time must be nonnegative, got {t}")));
    }
    let decay = 1.0 - (-flow.rate() * t).exp();
    modal_update(decomp0, mask, residual0, labels, decay)
}

/// Training outputs after `k` explicit Euler steps of size `eta`: preserved
/// modes contract by `(1 - eta N sigma0^2)^k`.
pub fn discrete_training_set_solution(
    k: usize,
    decomp0: &SpectralDecomposition,
    mask: &ModificationMask,
    residual0: &DVector<f64>,
    labels: &DVector<f64>,
    flow: FlowRate,
) -> Result<DVector<f64>> {
    let decay = 1.0 - (1.0 - flow.rate()).powi(k as i32);
    modal_update(decomp0, mask, residual0, labels, decay)
}

fn modal_update(
    decomp: &SpectralDecomposition,
    mask: &ModificationMask,
    residual0: &DVector<f64>,
    labels: &DVector<f64>,
    decay: f64,
) -> Result<DVector<f64>> {
    check_mask(decomp, mask)?;
    if labels.len() != residual0.len() {
        return Err(invalid("labels and residual differ in length"));
    }
    let mut c = decomp.project(residual0)?;
    for (i, ci) in c.iter_mut().enumerate() {
        *ci *= if mask.is_preserved(i) { decay } else { 0.0 };
    }
    Ok(labels + residual0 - decomp.u() * c)
}

/// Classical RK4 for the training residual under
/// `dr/dt = -eta N sigma0^2 U diag(mask) U^T r`.
///
/// `times` must start at 0 and increase strictly. Each interval is split
/// into equal steps no longer than `max_step`. Returns the residual at every
/// grid time.
pub fn ode_integrate(
    times: &[f64],
    decomp0: &SpectralDecomposition,
    mask: &ModificationMask,
    residual0: &DVector<f64>,
    flow: FlowRate,
    max_step: f64,
) -> Result<Vec<DVector<f64>>> {
    if times.first() != Some(&0.0) {
        return Err(invalid("time grid must start at 0"));
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(invalid("time grid must be strictly increasing"));
    }
    if !(max_step > 0.0) {
        return Err(invalid("max_step must be positive"));
    }
    if residual0.len() != decomp0.n_points() {
        return Err(invalid("residual length does not match the decomposition"));
    }
    let a = function_space_operator(decomp0, mask, flow.sigma0, flow.n_train)? * (-flow.eta);
    let rhs = |r: &DVector<f64>| &a * r;

    let mut r = residual0.clone();
    let mut out = Vec::with_capacity(times.len());
    out.push(r.clone());
    for w in times.windows(2) {
        let span = w[1] - w[0];
        let steps = (span / max_step).ceil().max(1.0) as usize;
        let h = span / steps as f64;
        for _ in 0..steps {
            let k1 = rhs(&r);
            let k2 = rhs(&(&r + &k1 * (h / 2.0)));
            let k3 = rhs(&(&r + &k2 * (h / 2.0)));
            let k4 = rhs(&(&r + &k3 * h));
            r += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
        out.push(r.clone());
    }
    Ok(out)
}

/// Converged prediction of gradient descent driven by a modified Jacobian
/// `J_phi = U diag(mask_i lambda_i) V_thin^T`:
/// `f_0(x) - J(x) J_phi^+ alpha_0`, with `J_phi^+ = V_thin diag(mask_i /
/// lambda_i) U^T`.
pub fn modified_jacobian_gd_prediction(
    x: &[f64],
    state0: &MlpState,
    decomp0: &SpectralDecomposition,
    mask: &ModificationMask,
    residual0: &DVector<f64>,
) -> Result<f64> {
    check_mask(decomp0, mask)?;
    let g = gradient_row(state0, x)?;
    let gv = decomp0.v_thin().tr_mul(&g);
    let au = decomp0.project(residual0)?;
    let correction: f64 = (0..decomp0.rank())
        .filter(|&i| mask.is_preserved(i))
        .map(|i| gv[i] * au[i] / decomp0.lambda()[i])
        .sum();
    Ok(state0.forward(x)? - correction)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{make_splits, DataConfig};
    use crate::network::{Activation, BiasInit};
    use crate::rng::{stream_rng, Stream};
    use rand::Rng;

    fn tiny_net(seed: u64) -> MlpConfig {
        MlpConfig {
            input_dim: 1,
            hidden_widths: vec![2048],
            activation: Activation::Relu,
            seed,
            bias_init: BiasInit::Uniform,
        }
    }

    fn tiny_splits(seed: u64) -> Splits {
        make_splits(&DataConfig { n_train: 8, n_val: 6, n_test: 6, sigma2: 4.0, seed, label_before_perturb: false }).unwrap()
    }

    fn setup(seed: u64) -> (MlpState, SpectralDecomposition, DVector<f64>, Splits) {
        let splits = tiny_splits(seed);
        let s = he_init(&tiny_net(seed)).unwrap();
        let d = decompose(&s.jacobian(&splits.train.inputs).unwrap(), DEFAULT_RANK_TOL).unwrap();
        let r = s.forward_batch(&splits.train.inputs).unwrap() - labels(&splits.train);
        (s, d, r, splits)
    }

    fn random_mask(n: usize, seed: u64) -> ModificationMask {
        let mut rng = stream_rng(seed, Stream::Aux);
        ModificationMask::new((0..n).map(|_| rng.random::<bool>()).collect())
    }

    const FLOW: FlowRate = FlowRate { eta: 0.05, sigma0: 0.5, n_train: 8 };

    #[test]
    fn lr_schedule_halves() {
        let c = TrainConfig { eta: 0.1, lr_halving_period: 100, ..Default::default() };
        assert_eq!(c.lr_at(0), 0.1);
        assert_eq!(c.lr_at(99), 0.1);
        assert_eq!(c.lr_at(100), 0.05);
        assert_eq!(c.lr_at(499), 0.1 / 16.0);
        assert_eq!(TrainConfig { lr_halving_period: 0, ..c }.lr_at(1000), 0.1);
    }

    #[test]
    fn closed_form_at_time_zero_and_all_cut() {
        let (s, d, r, splits) = setup(1);
        let x = [splits.test.inputs[0]];
        let f0 = s.forward(&x).unwrap();
        let all = ModificationMask::all_preserved(8);
        assert_eq!(closed_form_prediction(&x, 0.0, &s, &d, &all, &r, FLOW).unwrap(), f0);
        let cut = ModificationMask::all_cut(8);
        assert_eq!(closed_form_prediction(&x, 3.0, &s, &d, &cut, &r, FLOW).unwrap(), f0);
        assert_eq!(converged_prediction(&x, &s, &d, &cut, &r).unwrap(), f0);
        assert_eq!(converged_prediction(&x, &s, &d, &all, &DVector::zeros(8)).unwrap(), f0);
    }

    #[test]
    fn converged_interpolates_training_points_when_all_preserved() {
        let (s, d, r, splits) = setup(2);
        let all = ModificationMask::all_preserved(8);
        for (x, y) in splits.train.inputs.iter().zip(&splits.train.labels) {
            assert!((converged_prediction(&[*x], &s, &d, &all, &r).unwrap() - y).abs() < 1e-8);
        }
    }

    #[test]
    fn late_time_equals_converged() {
        let (s, d, r, splits) = setup(3);
        let mask = random_mask(8, 3);
        let t = 50.0 / FLOW.rate();
        for x in &splits.val.inputs {
            let a = closed_form_prediction(&[*x], t, &s, &d, &mask, &r, FLOW).unwrap();
            let b = converged_prediction(&[*x], &s, &d, &mask, &r).unwrap();
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn converged_on_training_inputs_matches_training_solution() {
        let (s, d, r, splits) = setup(4);
        let mask = random_mask(8, 4);
        let y = labels(&splits.train);
        let sol = training_set_solution(50.0 / FLOW.rate(), &d, &mask, &r, &y, FLOW).unwrap();
        for (i, x) in splits.train.inputs.iter().enumerate() {
            assert!((converged_prediction(&[*x], &s, &d, &mask, &r).unwrap() - sol[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn training_solution_endpoints() {
        let (_, d, r, splits) = setup(5);
        let y = labels(&splits.train);
        let all = ModificationMask::all_preserved(8);
        assert!((training_set_solution(0.0, &d, &all, &r, &y, FLOW).unwrap() - (&y + &r)).amax() < 1e-14);
        assert!((training_set_solution(1e6, &d, &all, &r, &y, FLOW).unwrap() - &y).amax() < 1e-12);
        assert!(training_set_solution(-1.0, &d, &all, &r, &y, FLOW).is_err());
    }

    #[test]
    fn ode_matches_closed_form_with_small_steps() {
        let (_, d, r, splits) = setup(6);
        let y = labels(&splits.train);
        let mask = random_mask(8, 6);
        let c = FLOW.rate();
        let times: Vec<f64> = (0..=10).map(|k| k as f64 / c).collect();
        let traj = ode_integrate(&times, &d, &mask, &r, FLOW, 0.01 / c).unwrap();
        for (t, rt) in times.iter().zip(&traj) {
            let exact = training_set_solution(*t, &d, &mask, &r, &y, FLOW).unwrap();
            assert!((rt + &y - exact).amax() <= 1e-8);
        }
    }

    #[test]
    fn ode_error_at_coarse_step_follows_rk4_truncation() {
        // With h * rate = 0.1, each RK4 step multiplies a preserved mode by the
        // degree-4 Taylor polynomial of exp(-0.1) rather than exp(-0.1).
        let (_, d, r, splits) = setup(7);
        let y = labels(&splits.train);
        let all = ModificationMask::all_preserved(8);
        let c = FLOW.rate();
        let times: Vec<f64> = (0..=100).map(|k| 0.1 * k as f64 / c).collect();
        let traj = ode_integrate(&times, &d, &all, &r, FLOW, 0.1 / c).unwrap();
        let z: f64 = -0.1;
        let taylor = 1.0 + z + z * z / 2.0 + z.powi(3) / 6.0 + z.powi(4) / 24.0;
        let au = d.project(&r).unwrap();
        let mut worst = 0.0f64;
        for (k, (t, rt)) in times.iter().zip(&traj).enumerate() {
            let exact = training_set_solution(*t, &d, &all, &r, &y, FLOW).unwrap();
            let err = (rt + &y - exact).amax();
            let bound = (taylor.powi(k as i32) - (z * k as f64).exp()).abs() * au.iter().map(|a| a.abs()).sum::<f64>();
            assert!(err <= bound * (1.0 + 1e-6) + 1e-13, "k={k} err={err} bound={bound}");
            worst = worst.max(err);
        }
        assert!(worst > 0.0);
    }

    #[test]
    fn ode_mode_behaviour() {
        let (_, d, r, _) = setup(8);
        let mask = random_mask(8, 8);
        let c = FLOW.rate();
        let times: Vec<f64> = (0..=20).map(|k| 0.25 * k as f64 / c).collect();
        let traj = ode_integrate(&times, &d, &mask, &r, FLOW, 0.01 / c).unwrap();
        let coords: Vec<DVector<f64>> = traj.iter().map(|v| d.project(v).unwrap()).collect();
        for i in 0..8 {
            for w in coords.windows(2) {
                if mask.is_preserved(i) {
                    assert!(w[1][i].abs() <= w[0][i].abs());
                } else {
                    assert!((w[1][i] - coords[0][i]).abs() <= 1e-12);
                }
            }
        }
        let cut = ModificationMask::all_cut(8);
        let one = ode_integrate(&[0.0, 1.0], &d, &cut, &r, FLOW, 0.1).unwrap();
        assert_eq!(one[1], r);
        assert!(ode_integrate(&[0.5, 1.0], &d, &cut, &r, FLOW, 0.1).is_err());
        assert!(ode_integrate(&[0.0, 1.0, 1.0], &d, &cut, &r, FLOW, 0.1).is_err());
    }

    #[test]
    fn modified_jacobian_solution_equals_converged() {
        let (s, d, r, splits) = setup(9);
        for k in 0..20 {
            let mask = random_mask(8, 100 + k);
            for x in &splits.test.inputs {
                let a = modified_jacobian_gd_prediction(&[*x], &s, &d, &mask, &r).unwrap();
                let b = converged_prediction(&[*x], &s, &d, &mask, &r).unwrap();
                assert!((a - b).abs() <= 1e-12);
            }
        }
        let x = [0.3];
        let cut = ModificationMask::all_cut(8);
        assert_eq!(modified_jacobian_gd_prediction(&x, &s, &d, &cut, &r).unwrap(), s.forward(&x).unwrap());
    }

    #[test]
    fn modified_jacobian_solution_matches_dense_pseudoinverse() {
        let (s, d, r, splits) = setup(10);
        let mask = random_mask(8, 10);
        let j = s.jacobian(&splits.train.inputs).unwrap();
        // Independent route: nalgebra SVD of J, zero the cut singular values,
        // dense pseudo-inverse.
        let svd = nalgebra::SVD::new(j.clone(), true, true);
        let mut idx: Vec<usize> = (0..8).collect();
        idx.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let mut sv = svd.singular_values.clone();
        for (rank, &i) in idx.iter().enumerate() {
            if !mask.is_preserved(rank) {
                sv[i] = 0.0;
            }
        }
        let u = svd.u.as_ref().unwrap();
        let vt = svd.v_t.as_ref().unwrap();
        let j_phi = u * DMatrix::from_diagonal(&sv) * vt;
        let pinv = j_phi.pseudo_inverse(1e-9 * svd.singular_values.max()).unwrap();
        for x in &splits.test.inputs {
            let g = gradient_row(&s, &[*x]).unwrap();
            let dense = s.forward(&[*x]).unwrap() - (g.transpose() * &pinv * &r)[0];
            let fast = modified_jacobian_gd_prediction(&[*x], &s, &d, &mask, &r).unwrap();
            assert!((dense - fast).abs() <= 1e-10, "{dense} vs {fast}");
        }
    }

    #[test]
    fn modified_jacobian_gradient_descent_converges_to_closed_form() {
        // Iterate theta <- theta - h J_phi^T r on the linearized model.
        let (s, d, r0, splits) = setup(11);
        let mask = random_mask(8, 11);
        let j = s.jacobian(&splits.train.inputs).unwrap();
        let mut sv = d.lambda().clone();
        for i in 0..8 {
            if !mask.is_preserved(i) {
                sv[i] = 0.0;
            }
        }
        let j_phi = d.u() * DMatrix::from_diagonal(&sv) * d.v_thin().transpose();
        let h = 1.0 / d.lambda()[0].powi(2);
        // delta_k = -h J_phi^T sum_{m<k} r_m, and r_{k+1} = r_k - h J J_phi^T r_k.
        let k_phi = &j * j_phi.transpose();
        let mut r = r0.clone();
        let mut acc = DVector::zeros(8);
        let min_kept = (0..8).filter(|&i| mask.is_preserved(i)).map(|i| d.lambda()[i].powi(2)).fold(f64::INFINITY, f64::min);
        let steps = ((40.0 / (h * min_kept)).ceil() as usize).min(20_000_000);
        for _ in 0..steps {
            acc += &r;
            r -= &k_phi * &r * h;
        }
        let delta = j_phi.tr_mul(&acc) * (-h);
        for x in &splits.val.inputs {
            let g = gradient_row(&s, &[*x]).unwrap();
            let iterated = s.forward(&[*x]).unwrap() + g.dot(&delta);
            let closed = modified_jacobian_gd_prediction(&[*x], &s, &d, &mask, &r0).unwrap();
            assert!((iterated - closed).abs() < 1e-6, "{iterated} vs {closed}");
        }
    }

    fn linear_cfg(eta: f64, epochs: usize, algorithm: Algorithm) -> TrainConfig {
        TrainConfig {
            eta,
            epochs,
            lr_halving_period: 0,
            sigma0: Some(1.0),
            algorithm,
            refresh_spectrum: false,
            linearized: true,
            ..Default::default()
        }
    }

    #[test]
    fn linearized_ngd_decays_geometrically() {
        let splits = tiny_splits(12);
        let net = tiny_net(12);
        let n = 8.0;
        // eta N sigma0^2 = 0.1
        let cfg = linear_cfg(0.1 / n, 400, Algorithm::Ngd);
        let traj = train(&splits, &net, &cfg).unwrap();
        let s = he_init(&net).unwrap();
        let r0 = s.forward_batch(&splits.train.inputs).unwrap() - labels(&splits.train);
        let mse0 = r0.norm_squared() / n;
        for rec in traj.records.iter().take(50) {
            let expect = mse0 * 0.9f64.powi(2 * rec.epoch as i32);
            assert!((rec.train_mse - expect).abs() <= 1e-10 * mse0.max(1.0), "epoch {}", rec.epoch);
        }
        assert!(traj.records.last().unwrap().train_mse <= 1e-10);
        assert!(traj.records.windows(2).all(|w| w[1].train_mse <= w[0].train_mse + 1e-24));
    }

    #[test]
    fn all_cut_mask_freezes_parameters() {
        let splits = tiny_splits(13);
        let net = tiny_net(13);
        let cfg = linear_cfg(0.01, 5, Algorithm::Ngd);
        let traj = train_with(&splits, &net, &cfg, MaskPolicy::Fixed(ModificationMask::all_cut(8)), &mut Silent).unwrap();
        assert_eq!(traj.final_state, traj.initial_state);
        assert!(traj.records.iter().all(|r| r.train_mse == traj.initial_train_mse && r.n_preserved == 0));

        let nonlinear = TrainConfig { linearized: false, ..cfg };
        let traj = train_with(&splits, &net, &nonlinear, MaskPolicy::Fixed(ModificationMask::all_cut(8)), &mut Silent).unwrap();
        assert_eq!(traj.final_state, traj.initial_state);
    }

    #[test]
    fn cut_all_policy_keeps_the_network_fixed() {
        let splits = tiny_splits(19);
        let cfg = TrainConfig { epochs: 3, ..Default::default() };
        let traj = train_with(&splits, &tiny_net(19), &cfg, MaskPolicy::CutAll, &mut Silent).unwrap();
        assert_eq!(traj.final_state, traj.initial_state);
        assert!(traj.records.iter().all(|r| r.test_mse == traj.initial_test_mse));
    }

    #[test]
    fn epochs_csv_round_trips() {
        let splits = tiny_splits(20);
        let cfg = TrainConfig { epochs: 3, ..Default::default() };
        let traj = train(&splits, &tiny_net(20), &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("epochs.csv");
        write_epochs_csv(&traj.records, &path).unwrap();
        let (header, rows) = crate::io::read_csv(&path).unwrap();
        assert_eq!(header, ["epoch", "lr", "train_mse", "val_mse", "test_mse", "n_preserved", "n_modes"]);
        assert_eq!(rows.len(), 3);
        for (row, rec) in rows.iter().zip(&traj.records) {
            assert_eq!(row[0].parse::<usize>().unwrap(), rec.epoch);
            assert_eq!(row[4].parse::<f64>().unwrap().to_bits(), rec.test_mse.to_bits());
        }
    }

    #[test]
    fn fixed_mask_needs_frozen_spectrum_of_matching_size() {
        let splits = tiny_splits(14);
        let net = tiny_net(14);
        let cfg = TrainConfig { linearized: false, refresh_spectrum: true, ..linear_cfg(0.01, 2, Algorithm::Ngd) };
        assert!(train_with(&splits, &net, &cfg, MaskPolicy::Fixed(ModificationMask::all_cut(8)), &mut Silent).is_err());
        let cfg = linear_cfg(0.01, 2, Algorithm::Ngd);
        assert!(train_with(&splits, &net, &cfg, MaskPolicy::Fixed(ModificationMask::all_cut(3)), &mut Silent).is_err());
    }

    #[test]
    fn cut_modes_are_never_trained() {
        let splits = tiny_splits(15);
        let net = tiny_net(15);
        let mask = random_mask(8, 15);
        let cfg = linear_cfg(0.05 / 8.0, 30, Algorithm::Ngd);
        let s = he_init(&net).unwrap();
        let d = decompose(&s.jacobian(&splits.train.inputs).unwrap(), DEFAULT_RANK_TOL).unwrap();
        let y = labels(&splits.train);
        let r0 = s.forward_batch(&splits.train.inputs).unwrap() - &y;
        let traj = train_with(&splits, &net, &cfg, MaskPolicy::Fixed(mask.clone()), &mut Silent).unwrap();
        let j = s.jacobian(&splits.train.inputs).unwrap();
        let delta = traj.final_state.params() - s.params();
        let rk = &r0 + j * delta;
        let (a0, ak) = (d.project(&r0).unwrap(), d.project(&rk).unwrap());
        for i in 0..8 {
            if !mask.is_preserved(i) {
                assert!((a0[i] - ak[i]).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn training_is_deterministic_and_strict_rank_propagates() {
        let splits = tiny_splits(16);
        let net = tiny_net(16);
        let cfg = TrainConfig { epochs: 4, ..Default::default() };
        let a = train(&splits, &net, &cfg).unwrap();
        let b = train(&splits, &net, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.records.len(), 4);

        // Zero biases make a relu net affine on nonnegative inputs, so its
        // NTK has rank at most 2.
        let relu = MlpConfig { activation: Activation::Relu, bias_init: BiasInit::Zero, ..net };
        let strict = TrainConfig { strict_rank: true, ..cfg.clone() };
        assert!(matches!(train(&splits, &relu, &strict), Err(crate::Error::AssumptionViolation { .. })));
        let loose = train(&splits, &relu, &cfg).unwrap();
        assert!(loose.records[0].n_modes <= 2);
    }

    #[test]
    fn cut_smallest_follows_schedule() {
        let splits = tiny_splits(17);
        let net = tiny_net(17);
        let cfg = TrainConfig { epochs: 3, ..Default::default() };
        let schedule = [1usize, 3, 0];
        let traj = train_with(&splits, &net, &cfg, MaskPolicy::CutSmallest(Some(&schedule)), &mut Silent).unwrap();
        for (rec, k) in traj.records.iter().zip(schedule) {
            assert_eq!(rec.preserved, ModificationMask::cut_smallest(rec.n_modes, k));
        }
        assert!(train_with(&splits, &net, &cfg, MaskPolicy::CutSmallest(Some(&[1])), &mut Silent).is_err());
    }

    #[test]
    fn observer_sees_every_epoch_with_requested_statistics() {
        struct Count(usize, usize);
        impl EpochObserver for Count {
            fn wants_statistics(&self, epoch: usize) -> bool {
                epoch.is_multiple_of(2)
            }
            fn observe(&mut self, s: &EpochSnapshot<'_>) -> Result<()> {
                self.0 += 1;
                if s.stats.is_some() {
                    self.1 += 1;
                }
                Ok(())
            }
        }
        let mut c = Count(0, 0);
        let cfg = TrainConfig { epochs: 5, algorithm: Algorithm::Ngd, ..Default::default() };
        train_with(&tiny_splits(18), &tiny_net(18), &cfg, MaskPolicy::PreserveAll, &mut c).unwrap();
        assert_eq!((c.0, c.1), (5, 2));
    }
}
