//! Generalization-error decomposition and the per-mode cut criterion.
//!
//! For the converged predictor `f_inf(x) = f_0(x) - J(x) V_thin c` with
//! coefficients `c_i = mask_i (alpha^T u_i) / lambda_i`, the population risk
//! splits exactly into
//!
//! ```text
//! R1 = (||alpha||^2 - sum_{i preserved} (alpha^T u_i)^2) / N
//! R2 = B - 2 L c + c^T Q c
//! ```
//!
//! where `alpha = f_0(X) - Y` and the discrepancy statistics compare
//! population expectations with their training-set counterparts:
//!
//! ```text
//! B = E[alpha(x,y)^2]          - ||alpha||^2 / N
//! L = E[alpha(x,y) J(x)] V     - alpha^T J V / N
//! Q = V^T E[J(x)^T J(x)] V     - V^T J^T J V / N
//! ```
//!
//! Keeping only the diagonal of `Q` makes the risk separable across modes; a
//! mode is then worth cutting exactly when its preserve cost exceeds its cut
//! cost, which is the criterion in [`criterion_mask`].
//!
//! All expectations are empirical means over a population [`Dataset`]. Only
//! the `M x r` product `J_pop V_thin` is ever formed.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::datasets::Dataset;
use crate::error::{invalid, Result};
use crate::io::{fmt_f64, CsvWriter};
use crate::network::MlpState;
use crate::spectral::{ModificationMask, SpectralDecomposition};

/// Per-mode discrepancy statistics (diagonal of `Q`, entries of `L`) and the
/// scalar `B`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeStatistics {
    pub lambda_sq: DVector<f64>,
    pub alpha_u: DVector<f64>,
    pub q: DVector<f64>,
    pub l: DVector<f64>,
    pub b_total: f64,
    /// `||alpha||^2` on the training set. Differs from `sum alpha_u^2` only
    /// when the decomposition was truncated.
    pub alpha_norm_sq: f64,
    pub n_train: usize,
}

/// Statistics with the full (non-diagonal) `Q`.
#[derive(Debug, Clone, PartialEq)]
pub struct FullDiscrepancy {
    pub b: f64,
    pub l: DVector<f64>,
    pub q: DMatrix<f64>,
    pub diagonal: ModeStatistics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiskReport {
    pub r1: f64,
    pub r2: f64,
    pub total: f64,
    /// `(preserve_cost, cut_cost)` per mode.
    pub per_mode: Vec<(f64, f64)>,
}

impl FullDiscrepancy {
    /// Builds the statistics from precomputed pieces.
    ///
    /// `alpha_train` is `f(X) - Y` on the points `decomp` was built from,
    /// `alpha_pop` is `f(x) - y` on the population and `j_pop` is the
    /// population Jacobian (`M x P`) of the same model.
    pub fn from_parts(
        decomp: &SpectralDecomposition,
        alpha_train: &DVector<f64>,
        alpha_pop: &DVector<f64>,
        j_pop: &DMatrix<f64>,
    ) -> Result<Self> {
        let m = alpha_pop.len();
        if m == 0 {
            return Err(invalid("population must be nonempty"));
        }
        if j_pop.nrows() != m || j_pop.ncols() != decomp.n_params() {
            return Err(invalid(format!(
                "population Jacobian is {}x{}, expected {m}x{}",
                j_pop.nrows(),
                j_pop.ncols(),
                decomp.n_params()
            )));
        }
        let n = decomp.n_points();
        let nf = n as f64;
        let mf = m as f64;
        let alpha_u = decomp.project(alpha_train)?;
        let lambda = decomp.lambda();
        let lambda_sq = decomp.lambda_sq();
        let alpha_norm_sq = alpha_train.norm_squared();

        let jv = j_pop * decomp.v_thin();
        let mut q = jv.tr_mul(&jv) / mf;
        for i in 0..decomp.rank() {
            q[(i, i)] -= lambda_sq[i] / nf;
        }
        let mut l = jv.tr_mul(alpha_pop) / mf;
        for i in 0..decomp.rank() {
            l[i] -= lambda[i] * alpha_u[i] / nf;
        }
        let b = alpha_pop.norm_squared() / mf - alpha_norm_sq / nf;

        let diagonal = ModeStatistics {
            lambda_sq,
            alpha_u,
            q: q.diagonal(),
            l: l.clone(),
            b_total: b,
            alpha_norm_sq,
            n_train: n,
        };
        Ok(Self { b, l, q, diagonal })
    }

    /// Exact `R1 + R2` using the full `Q`.
    pub fn risk(&self, mask: &ModificationMask) -> Result<RiskReport> {
        let stats = &self.diagonal;
        check_mask(stats, mask)?;
        let c = coefficients(stats, mask);
        let r1 = training_term(stats, mask);
        let r2 = self.b - 2.0 * self.l.dot(&c) + c.dot(&(&self.q * &c));
        Ok(RiskReport {
            r1,
            r2,
            total: r1 + r2,
            per_mode: per_mode_costs(stats),
        })
    }
}

impl ModeStatistics {
    pub fn rank(&self) -> usize {
        self.lambda_sq.len()
    }

    /// `q_i / lambda_i^2 - 2 l_i / ((alpha^T u_i) lambda_i) - 1/N` per mode.
    pub fn criterion_values(&self) -> Vec<f64> {
        let inv_n = 1.0 / self.n_train as f64;
        (0..self.rank())
            .map(|i| {
                let ls = self.lambda_sq[i];
                self.q[i] / ls - 2.0 * self.l[i] / (self.alpha_u[i] * ls.sqrt()) - inv_n
            })
            .collect()
    }

    /// `1e-12 * ||alpha||`.
    pub fn default_alpha_floor(&self) -> f64 {
        1e-12 * self.alpha_norm_sq.sqrt()
    }
}

fn evaluate(state: &MlpState, data: &Dataset) -> Result<DVector<f64>> {
    let f = state.forward_batch(&data.inputs)?;
    Ok(f - DVector::from_column_slice(&data.labels))
}

/// Full discrepancy statistics of `state` between `train` (from which
/// `decomp` was built) and `population`.
pub fn population_discrepancy(
    decomp: &SpectralDecomposition,
    state: &MlpState,
    train: &Dataset,
    population: &Dataset,
) -> Result<FullDiscrepancy> {
    if population.is_empty() {
        return Err(invalid("population must be nonempty"));
    }
    if train.len() != decomp.n_points() {
        return Err(invalid(format!(
            "training set has {} points, decomposition has {}",
            train.len(),
            decomp.n_points()
        )));
    }
    let alpha_train = evaluate(state, train)?;
    let alpha_pop = evaluate(state, population)?;
    let j_pop = state.jacobian(&population.inputs)?;
    FullDiscrepancy::from_parts(decomp, &alpha_train, &alpha_pop, &j_pop)
}

/// Per-mode statistics `(lambda_i^2, alpha^T u_i, q_i, l_i)` and `B`.
pub fn mode_statistics(
    decomp: &SpectralDecomposition,
    state: &MlpState,
    train: &Dataset,
    population: &Dataset,
) -> Result<ModeStatistics> {
    Ok(population_discrepancy(decomp, state, train, population)?.diagonal)
}

/// Cuts mode `i` iff its criterion value is strictly positive. Modes with
/// `|alpha^T u_i| < alpha_floor` are preserved.
pub fn criterion_mask(stats: &ModeStatistics, n_train: usize, alpha_floor: f64) -> Result<ModificationMask> {
    if n_train == 0 {
        return Err(invalid("n_train must be positive"));
    }
    let stats = ModeStatistics { n_train, ..stats.clone() };
    let values = stats.criterion_values();
    Ok(ModificationMask::new(
        values
            .iter()
            .zip(stats.alpha_u.iter())
            .map(|(v, a)| a.abs() < alpha_floor || !(*v > 0.0))
            .collect(),
    ))
}

fn check_mask(stats: &ModeStatistics, mask: &ModificationMask) -> Result<()> {
    if mask.len() != stats.rank() {
        return Err(invalid(format!("mask has {} entries, statistics have {}", mask.len(), stats.rank())));
    }
    Ok(())
}

fn coefficients(stats: &ModeStatistics, mask: &ModificationMask) -> DVector<f64> {
    DVector::from_fn(stats.rank(), |i, _| {
        if mask.is_preserved(i) {
            stats.alpha_u[i] / stats.lambda_sq[i].sqrt()
        } else {
            0.0
        }
    })
}

fn training_term(stats: &ModeStatistics, mask: &ModificationMask) -> f64 {
    let kept: f64 = (0..stats.rank())
        .filter(|&i| mask.is_preserved(i))
        .map(|i| stats.alpha_u[i].powi(2))
        .sum();
    (stats.alpha_norm_sq - kept) / stats.n_train as f64
}

fn per_mode_costs(stats: &ModeStatistics) -> Vec<(f64, f64)> {
    let inv_n = 1.0 / stats.n_train as f64;
    (0..stats.rank())
        .map(|i| {
            let a = stats.alpha_u[i];
            let lam = stats.lambda_sq[i].sqrt();
            let preserve = stats.q[i] * a * a / stats.lambda_sq[i] - 2.0 * stats.l[i] * a / lam;
            (preserve, a * a * inv_n)
        })
        .collect()
}

/// Orthogonal-form risk with the diagonal of `Q`. `B` enters once as a
/// mask-independent constant of `R2`.
pub fn risk_decomposition(stats: &ModeStatistics, mask: &ModificationMask, n_train: usize) -> Result<RiskReport> {
    if n_train == 0 {
        return Err(invalid("n_train must be positive"));
    }
    let stats = ModeStatistics { n_train, ..stats.clone() };
    check_mask(&stats, mask)?;
    let per_mode = per_mode_costs(&stats);
    let r1 = training_term(&stats, mask);
    let r2 = stats.b_total
        + per_mode
            .iter()
            .enumerate()
            .filter(|(i, _)| mask.is_preserved(*i))
            .map(|(_, c)| c.0)
            .sum::<f64>();
    Ok(RiskReport {
        r1,
        r2,
        total: r1 + r2,
        per_mode,
    })
}

/// Mean squared error of `predict` over `population`.
pub fn exact_population_risk<F: Fn(f64) -> f64>(predict: F, population: &Dataset) -> Result<f64> {
    if population.is_empty() {
        return Err(invalid("population must be nonempty"));
    }
    let sum: f64 = population
        .inputs
        .iter()
        .zip(&population.labels)
        .map(|(&x, &y)| (predict(x) - y).powi(2))
        .sum();
    Ok(sum / population.len() as f64)
}

/// Writes `i,lambda_sq,alpha_u,q,l,criterion_value,preserved,preserve_cost,cut_cost`.
pub fn write_mode_report_csv(stats: &ModeStatistics, mask: &ModificationMask, path: &Path) -> Result<()> {
    check_mask(stats, mask)?;
    let values = stats.criterion_values();
    let costs = per_mode_costs(stats);
    let mut w = CsvWriter::create(
        path,
        &["i", "lambda_sq", "alpha_u", "q", "l", "criterion_value", "preserved", "preserve_cost", "cut_cost"],
    )?;
    for i in 0..stats.rank() {
        w.row(&[
            (i + 1).to_string(),
            fmt_f64(stats.lambda_sq[i]),
            fmt_f64(stats.alpha_u[i]),
            fmt_f64(stats.q[i]),
            fmt_f64(stats.l[i]),
            fmt_f64(values[i]),
            (mask.is_preserved(i) as u8).to_string(),
            fmt_f64(costs[i].0),
            fmt_f64(costs[i].1),
        ])?;
    }
    w.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{he_init, Activation, BiasInit, MlpConfig};
    use crate::rng::{stream_rng, Stream};
    use crate::spectral::{decompose, DEFAULT_RANK_TOL};
    use rand::Rng;

    fn net(width: usize, seed: u64) -> MlpState {
        he_init(&MlpConfig {
            input_dim: 1,
            hidden_widths: vec![width],
            activation: Activation::Tanh,
            seed,
            bias_init: BiasInit::Uniform,
        })
        .unwrap()
    }

    fn data(n: usize, seed: u64, lo: f64, hi: f64) -> Dataset {
        let mut rng = stream_rng(seed, Stream::Aux);
        Dataset::from_target((0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect())
    }

    #[test]
    fn discrepancy_of_a_set_with_itself_vanishes() {
        let s = net(20, 1);
        let train = data(6, 2, 0.0, 1.0);
        let d = decompose(&s.jacobian(&train.inputs).unwrap(), DEFAULT_RANK_TOL).unwrap();
        let full = population_discrepancy(&d, &s, &train, &train).unwrap();
        assert!(full.q.amax() < 1e-10 && full.l.amax() < 1e-10 && full.b.abs() < 1e-10);
        for mask in [ModificationMask::all_preserved(6), ModificationMask::new(vec![true, false, true, false, false, true])] {
            let rep = risk_decomposition(&full.diagonal, &mask, 6).unwrap();
            assert!((rep.total - rep.r1).abs() < 1e-10);
            assert!((full.risk(&mask).unwrap().total - rep.r1).abs() < 1e-10);
        }
    }

    #[test]
    fn tiny_instance_matches_dense_construction() {
        // N=4, P=10 (width 3), M=6.
        let s = net(3, 3);
        let train = data(4, 4, 0.0, 1.0);
        let pop = data(6, 5, 0.0, 1.0);
        let j = s.jacobian(&train.inputs).unwrap();
        let d = decompose(&j, DEFAULT_RANK_TOL).unwrap();
        let stats = mode_statistics(&d, &s, &train, &pop).unwrap();

        let jp = s.jacobian(&pop.inputs).unwrap();
        let ejj = jp.transpose() * &jp / 6.0;
        let qd = d.v_thin().transpose() * (ejj - j.transpose() * &j / 4.0) * d.v_thin();
        let a_tr = s.forward_batch(&train.inputs).unwrap() - DVector::from_column_slice(&train.labels);
        let a_pop = s.forward_batch(&pop.inputs).unwrap() - DVector::from_column_slice(&pop.labels);
        let ld = ((jp.transpose() * &a_pop) / 6.0 - (j.transpose() * &a_tr) / 4.0).transpose() * d.v_thin();
        for i in 0..4 {
            assert!((stats.q[i] - qd[(i, i)]).abs() < 1e-10);
            assert!((stats.l[i] - ld[i]).abs() < 1e-10);
        }
        let bd = a_pop.norm_squared() / 6.0 - a_tr.norm_squared() / 4.0;
        assert!((stats.b_total - bd).abs() < 1e-12);
    }

    #[test]
    fn interpolating_init_has_zero_alpha_u() {
        let s = net(12, 6);
        let xs = vec![0.1, 0.5, 0.9];
        let ys = s.forward_batch(&xs).unwrap().iter().copied().collect();
        let train = Dataset::new(xs, ys).unwrap();
        let d = decompose(&s.jacobian(&train.inputs).unwrap(), DEFAULT_RANK_TOL).unwrap();
        let stats = mode_statistics(&d, &s, &train, &data(5, 1, 0.0, 1.0)).unwrap();
        assert!(stats.alpha_u.amax() == 0.0);
    }

    #[test]
    fn empty_population_is_rejected() {
        let s = net(8, 1);
        let train = data(3, 2, 0.0, 1.0);
        let d = decompose(&s.jacobian(&train.inputs).unwrap(), DEFAULT_RANK_TOL).unwrap();
        let empty = Dataset::new(vec![], vec![]).unwrap();
        assert!(mode_statistics(&d, &s, &train, &empty).is_err());
        assert!(exact_population_risk(|x| x, &empty).is_err());
    }

    fn synthetic(q: Vec<f64>, l: Vec<f64>, lambda_sq: Vec<f64>, alpha_u: Vec<f64>) -> ModeStatistics {
        let alpha_norm_sq = alpha_u.iter().map(|a| a * a).sum();
        ModeStatistics {
            lambda_sq: DVector::from_vec(lambda_sq),
            alpha_u: DVector::from_vec(alpha_u),
            q: DVector::from_vec(q),
            l: DVector::from_vec(l),
            b_total: 0.1,
            alpha_norm_sq,
            n_train: 8,
        }
    }

    #[test]
    fn criterion_sign_cases() {
        let zero = synthetic(vec![0.0], vec![0.0], vec![2.0], vec![1.0]);
        assert!((zero.criterion_values()[0] + 1.0 / 8.0).abs() < 1e-15);
        assert!(criterion_mask(&zero, 8, 0.0).unwrap().is_preserved(0));

        let big_q = synthetic(vec![50.0], vec![0.0], vec![0.5], vec![1.0]);
        assert!(!criterion_mask(&big_q, 8, 0.0).unwrap().is_preserved(0));

        let degenerate = synthetic(vec![50.0], vec![0.0], vec![0.5], vec![1e-20]);
        assert!(criterion_mask(&degenerate, 8, 1e-12).unwrap().is_preserved(0));
    }

    #[test]
    fn all_preserved_and_all_cut_training_terms() {
        let s = synthetic(vec![0.1, 0.2, 0.3], vec![0.01, -0.02, 0.03], vec![4.0, 1.0, 0.25], vec![0.5, -1.0, 2.0]);
        let all = risk_decomposition(&s, &ModificationMask::all_preserved(3), 8).unwrap();
        assert!(all.r1.abs() < 1e-15);
        let none = risk_decomposition(&s, &ModificationMask::all_cut(3), 8).unwrap();
        assert!((none.r1 - s.alpha_norm_sq / 8.0).abs() < 1e-15);
        assert!((none.r2 - s.b_total).abs() < 1e-15);
        assert!((none.total - none.r1 - none.r2).abs() < 1e-12);
    }

    #[test]
    fn flipping_a_bit_changes_total_by_cost_difference() {
        let s = synthetic(vec![0.4, -0.1, 0.3], vec![0.05, 0.02, -0.03], vec![3.0, 1.0, 0.1], vec![0.7, -0.4, 0.2]);
        let base = ModificationMask::new(vec![true, true, false]);
        let t0 = risk_decomposition(&s, &base, 8).unwrap();
        for i in 0..3 {
            let mut bits = base.as_slice().to_vec();
            bits[i] = !bits[i];
            let t1 = risk_decomposition(&s, &ModificationMask::new(bits.clone()), 8).unwrap();
            let (p, c) = t0.per_mode[i];
            let expect = if bits[i] { p - c } else { c - p };
            assert!((t1.total - t0.total - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn population_risk_examples() {
        let pop = Dataset::new(vec![0.1, 0.2, 0.3], vec![3.0, 3.0, 3.0]).unwrap();
        assert_eq!(exact_population_risk(|_| 2.0, &pop).unwrap(), 1.0);
        let exact = data(10, 3, 0.0, 1.0);
        assert_eq!(exact_population_risk(crate::datasets::target, &exact).unwrap(), 0.0);
    }

    #[test]
    fn mode_report_csv_schema() {
        let dir = tempfile::tempdir().unwrap();
        let s = synthetic(vec![0.4, -0.1], vec![0.05, 0.02], vec![3.0, 1.0], vec![0.7, -0.4]);
        let mask = criterion_mask(&s, 8, 0.0).unwrap();
        let path = dir.path().join("modes.csv");
        write_mode_report_csv(&s, &mask, &path).unwrap();
        let (h, rows) = crate::io::read_csv(&path).unwrap();
        assert_eq!(h.join(","), "i,lambda_sq,alpha_u,q,l,criterion_value,preserved,preserve_cost,cut_cost");
        assert_eq!(rows.len(), 2);
    }
}
