//! End-to-end use of the public API: data, network, spectrum, criterion and
//! training wired together the way the experiment harness does it.

use modngd::datasets::{make_splits, target, DataConfig};
use modngd::dynamics::{train, train_with, Algorithm, MaskPolicy, Silent, TrainConfig};
use modngd::network::{he_init, Activation, BiasInit, MlpConfig};
use modngd::risk::{criterion_mask, mode_statistics, risk_decomposition};
use modngd::spectral::{decompose_truncated, natural_gradient_step, ModificationMask};
use nalgebra::DVector;

fn data(seed: u64) -> DataConfig {
    DataConfig { n_train: 24, n_val: 16, n_test: 16, sigma2: 1.5, seed, label_before_perturb: false }
}

fn net(seed: u64) -> MlpConfig {
    MlpConfig { input_dim: 1, hidden_widths: vec![512], activation: Activation::Relu, seed, bias_init: BiasInit::Uniform }
}

fn short(algorithm: Algorithm) -> TrainConfig {
    TrainConfig { epochs: 30, lr_halving_period: 10, algorithm, ..TrainConfig::default() }
}

#[test]
fn criterion_mask_lowers_estimated_risk_against_both_extremes() {
    let splits = make_splits(&data(4)).unwrap();
    let state = he_init(&net(4)).unwrap();
    let j = state.jacobian(&splits.train.inputs).unwrap();
    let d = decompose_truncated(&j, 1e-12).unwrap();
    let stats = mode_statistics(&d, &state, &splits.train, &splits.val).unwrap();
    let n = splits.train.len();
    let mask = criterion_mask(&stats, n, stats.default_alpha_floor()).unwrap();
    let total = |m: &ModificationMask| risk_decomposition(&stats, m, n).unwrap().total;
    let chosen = total(&mask);
    assert!(chosen <= total(&ModificationMask::all_preserved(d.rank())) + 1e-15);
    assert!(chosen <= total(&ModificationMask::all_cut(d.rank())) + 1e-15);
}

#[test]
fn full_step_on_preserved_modes_fits_the_linear_model() {
    let splits = make_splits(&data(1)).unwrap();
    let state = he_init(&net(1)).unwrap();
    let x = &splits.train.inputs;
    let j = state.jacobian(x).unwrap();
    let d = decompose_truncated(&j, 1e-12).unwrap();
    let r = state.forward_batch(x).unwrap() - DVector::from_column_slice(&splits.train.labels);
    let n = x.len();
    let mask = ModificationMask::all_preserved(d.rank());
    let step = natural_gradient_step(&d, &mask, &r, 1.0 / (n as f64).sqrt(), n).unwrap();
    // J step is the projection of r onto the NTK range.
    let projected = d.u() * d.project(&r).unwrap();
    assert!((&j * step - projected).amax() < 1e-8 * r.amax().max(1.0));
}

#[test]
fn trainers_reduce_training_error_and_share_the_initialization() {
    let splits = make_splits(&data(2)).unwrap();
    let cfg = net(2);
    let ngd = train(&splits, &cfg, &short(Algorithm::Ngd)).unwrap();
    let modified = train(&splits, &cfg, &short(Algorithm::ModifiedNgd)).unwrap();
    assert_eq!(ngd.initial_state, modified.initial_state);
    assert_eq!(ngd.initial_test_mse, modified.initial_test_mse);
    for t in [&ngd, &modified] {
        assert_eq!(t.records.len(), 30);
        assert!(t.records.last().unwrap().train_mse < t.initial_train_mse);
        assert!(t.records.iter().all(|r| r.n_preserved <= r.n_modes));
    }
    assert!(ngd.records.iter().all(|r| r.n_preserved == r.n_modes));

    let schedule = modified.cut_counts();
    let cut = train_with(&splits, &cfg, &short(Algorithm::CutSmallest), MaskPolicy::CutSmallest(Some(&schedule)), &mut Silent)
        .unwrap();
    for (c, m) in cut.records.iter().zip(&modified.records) {
        assert_eq!(c.n_modes - c.n_preserved, (m.n_modes - m.n_preserved).min(c.n_modes));
    }
}

#[test]
fn labels_follow_the_target_on_every_split() {
    let s = make_splits(&DataConfig { label_before_perturb: true, ..data(3) }).unwrap();
    for (x, y) in s.train_raw.iter().zip(&s.train.labels) {
        assert_eq!(*y, target(*x));
    }
    for d in [&s.val, &s.test] {
        assert!(d.inputs.iter().zip(&d.labels).all(|(x, y)| *y == target(*x)));
    }
}
