//! Spectral machinery: thin SVD of the Jacobian, the NTK Gram matrix, the
//! eigenvalue modification operator and implicit application of the modified
//! inverse Fisher (MIFIM).
//!
//! With `J = U diag(lambda) V_thin^T` and the empirical Fisher
//! `F = J^T J / (N sigma0^2)`, the modified pseudo-inverse is
//! `F_phi^+ = N sigma0^2 V_thin diag(mask_i / lambda_i^2) V_thin^T`. Everything
//! here works through the thin factors; the `P x P` matrix is only built by
//! [`dense_mifim`] for small test problems.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result, NTK_POSITIVE_DEFINITE};
use crate::io::{fmt_f64, CsvWriter};

/// Default relative threshold on `lambda_i^2 / lambda_1^2`.
pub const DEFAULT_RANK_TOL: f64 = 1e-12;

/// Largest parameter count for which [`dense_mifim`] will build a `P x P`
/// matrix.
pub const DENSE_MIFIM_MAX_PARAMS: usize = 2048;

/// Thin SVD `J = U diag(lambda) V_thin^T` with singular values in
/// descending order.
///
/// `u` is `N x r` and `v` is `P x r`, where `r = N` for a full-rank
/// decomposition from [`decompose`] and `r <= N` for one from
/// [`decompose_truncated`]. Each column of `u` is signed so that its
/// largest-magnitude entry is positive; the matching column of `v` carries
/// the same sign.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralDecomposition {
    u: DMatrix<f64>,
    lambda: DVector<f64>,
    v: DMatrix<f64>,
    dropped: usize,
}

impl SpectralDecomposition {
    pub fn u(&self) -> &DMatrix<f64> {
        &self.u
    }

    pub fn lambda(&self) -> &DVector<f64> {
        &self.lambda
    }

    pub fn lambda_sq(&self) -> DVector<f64> {
        self.lambda.map(|l| l * l)
    }

    pub fn v_thin(&self) -> &DMatrix<f64> {
        &self.v
    }

    /// Number of data points (rows of the decomposed Jacobian).
    pub fn n_points(&self) -> usize {
        self.u.nrows()
    }

    /// Number of retained modes.
    pub fn rank(&self) -> usize {
        self.lambda.len()
    }

    pub fn n_params(&self) -> usize {
        self.v.nrows()
    }

    /// Modes discarded by [`decompose_truncated`] as numerically null.
    pub fn dropped(&self) -> usize {
        self.dropped
    }

    /// `U diag(lambda) V_thin^T`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut us = self.u.clone();
        for (mut col, l) in us.column_iter_mut().zip(self.lambda.iter()) {
            col *= *l;
        }
        us * self.v.transpose()
    }

    /// `U^T r`: coordinates of a function-space vector in the NTK eigenbasis.
    pub fn project(&self, r: &DVector<f64>) -> Result<DVector<f64>> {
        if r.len() != self.n_points() {
            return Err(invalid(format!(
                "vector has length {}, decomposition has {} points",
                r.len(),
                self.n_points()
            )));
        }
        Ok(self.u.tr_mul(r))
    }
}

/// Thin SVD of `j` (`N x P`, `N <= P`).
///
/// Fails with an assumption violation if any `lambda_i^2 <= rank_tol *
/// lambda_1^2`, i.e. if the NTK `J J^T` is not numerically positive definite.
pub fn decompose(j: &DMatrix<f64>, rank_tol: f64) -> Result<SpectralDecomposition> {
    let d = svd_sorted(j, rank_tol)?;
    let top = d.lambda[0] * d.lambda[0];
    if let Some(i) = d.lambda.iter().position(|l| !(l * l > rank_tol * top)) {
        return Err(Error::AssumptionViolation {
            assumption: NTK_POSITIVE_DEFINITE,
            detail: format!(
                "lambda_{}^2 = {:e} is not above {rank_tol:e} * lambda_1^2 = {:e}",
                i + 1,
                d.lambda[i] * d.lambda[i],
                rank_tol * top
            ),
        });
    }
    Ok(d)
}

/// Like [`decompose`] but keeps only the modes with
/// `lambda_i^2 > rank_tol * lambda_1^2` instead of failing. The discarded
/// directions behave as permanently cut modes everywhere downstream.
pub fn decompose_truncated(j: &DMatrix<f64>, rank_tol: f64) -> Result<SpectralDecomposition> {
    let d = svd_sorted(j, rank_tol)?;
    let top = d.lambda[0] * d.lambda[0];
    let keep = d.lambda.iter().take_while(|l| *l * *l > rank_tol * top).count();
    if keep == d.rank() {
        return Ok(d);
    }
    Ok(SpectralDecomposition {
        u: d.u.columns(0, keep).into_owned(),
        lambda: d.lambda.rows(0, keep).into_owned(),
        v: d.v.columns(0, keep).into_owned(),
        dropped: d.rank() - keep,
    })
}

/// `J^T = Q R`, `R = U_R S V_R^T`, hence `J = V_R S (Q U_R)^T`. Working on the
/// small triangular factor avoids squaring the condition number.
fn svd_sorted(j: &DMatrix<f64>, rank_tol: f64) -> Result<SpectralDecomposition> {
    let (n, p) = j.shape();
    if n == 0 {
        return Err(invalid("cannot decompose an empty Jacobian"));
    }
    if n > p {
        return Err(invalid(format!("decomposition needs N <= P, got N={n}, P={p}")));
    }
    if !(rank_tol >= 0.0) {
        return Err(invalid(format!("rank_tol must be nonnegative, got {rank_tol}")));
    }
    if j.iter().any(|v| !v.is_finite()) {
        return Err(invalid("Jacobian has non-finite entries"));
    }

    let jt = faer::Mat::<f64>::from_fn(p, n, |i, k| j[(k, i)]);
    let qr = jt.qr();
    let r = qr.thin_R();
    let q = qr.compute_thin_Q();
    let svd = r.svd().map_err(|e| Error::InvalidArgument(format!("SVD did not converge: {e:?}")))?;
    let ur = svd.U();
    let vr = svd.V();
    let s = svd.S().column_vector();
    let qu = &q * ur;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));

    let mut u = DMatrix::zeros(n, n);
    let mut v = DMatrix::zeros(p, n);
    let mut lambda = DVector::zeros(n);
    for (dst, &src) in order.iter().enumerate() {
        lambda[dst] = s[src];
        let mut best = 0.0f64;
        let mut sign = 1.0;
        for i in 0..n {
            let x = vr[(i, src)];
            if x.abs() > best {
                best = x.abs();
                sign = x.signum();
            }
        }
        for i in 0..n {
            u[(i, dst)] = sign * vr[(i, src)];
        }
        for i in 0..p {
            v[(i, dst)] = sign * qu[(i, src)];
        }
    }
    if !(lambda[0] > 0.0) {
        return Err(Error::AssumptionViolation {
            assumption: NTK_POSITIVE_DEFINITE,
            detail: "Jacobian is identically zero".into(),
        });
    }
    Ok(SpectralDecomposition {
        u,
        lambda,
        v,
        dropped: 0,
    })
}

/// Preserved (`true`) versus cut (`false`) eigenmodes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModificationMask {
    preserved: Vec<bool>,
}

impl ModificationMask {
    pub fn new(preserved: Vec<bool>) -> Self {
        Self { preserved }
    }

    pub fn all_preserved(n: usize) -> Self {
        Self::new(vec![true; n])
    }

    pub fn all_cut(n: usize) -> Self {
        Self::new(vec![false; n])
    }

    /// Preserves every mode except the `k` with the smallest singular values
    /// (the last `k` in descending order).
    pub fn cut_smallest(n: usize, k: usize) -> Self {
        let k = k.min(n);
        Self::new((0..n).map(|i| i < n - k).collect())
    }

    pub fn len(&self) -> usize {
        self.preserved.len()
    }

    pub fn is_empty(&self) -> bool {
        self.preserved.is_empty()
    }

    pub fn is_preserved(&self, i: usize) -> bool {
        self.preserved[i]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.preserved
    }

    pub fn n_preserved(&self) -> usize {
        self.preserved.iter().filter(|&&p| p).count()
    }

    pub fn n_cut(&self) -> usize {
        self.len() - self.n_preserved()
    }

    /// `1.0` on preserved modes, `0.0` on cut ones.
    pub fn indicator(&self) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.preserved.iter().map(|&p| if p { 1.0 } else { 0.0 }))
    }

    /// Compact `0/1` string, mode 1 first.
    pub fn bitstring(&self) -> String {
        self.preserved.iter().map(|&p| if p { '1' } else { '0' }).collect()
    }

    fn check(&self, n: usize) -> Result<()> {
        if self.len() != n {
            return Err(invalid(format!("mask has {} entries, expected {n}", self.len())));
        }
        Ok(())
    }
}

/// Empirical Fisher spectrum under the Gaussian output model.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherSpectrum {
    pub sigma0: f64,
    pub n_train: usize,
    pub lambda_sq: DVector<f64>,
}

impl FisherSpectrum {
    pub fn new(decomp: &SpectralDecomposition, sigma0: f64, n_train: usize) -> Result<Self> {
        check_scale(sigma0, n_train)?;
        Ok(Self {
            sigma0,
            n_train,
            lambda_sq: decomp.lambda_sq(),
        })
    }

    /// All `n_params` eigenvalues in descending order: `lambda_i^2 / (N
    /// sigma0^2)` followed by zeros.
    pub fn eigenvalues(&self, n_params: usize) -> Vec<f64> {
        let scale = self.n_train as f64 * self.sigma0 * self.sigma0;
        let mut out: Vec<f64> = self.lambda_sq.iter().map(|l| l / scale).collect();
        out.resize(n_params.max(out.len()), 0.0);
        out
    }
}

fn check_scale(sigma0: f64, n_train: usize) -> Result<f64> {
    if !(sigma0 > 0.0) || !sigma0.is_finite() {
        return Err(invalid(format!("sigma0 must be positive, got {sigma0}")));
    }
    if n_train == 0 {
        return Err(invalid("n_train must be positive"));
    }
    Ok(n_train as f64 * sigma0 * sigma0)
}

/// NTK Gram matrix `U diag(lambda^2) U^T`.
pub fn ntk_gram(decomp: &SpectralDecomposition) -> DMatrix<f64> {
    let mut ul = decomp.u.clone();
    for (mut col, l) in ul.column_iter_mut().zip(decomp.lambda.iter()) {
        col *= l * l;
    }
    ul * decomp.u.transpose()
}

/// `phi(1 / lambda_i^2)`: `1 / lambda_i^2` on preserved modes, 0 on cut ones.
pub fn apply_phi(lambda: &DVector<f64>, mask: &ModificationMask) -> Result<DVector<f64>> {
    mask.check(lambda.len())?;
    Ok(DVector::from_iterator(
        lambda.len(),
        lambda
            .iter()
            .zip(mask.as_slice())
            .map(|(l, &keep)| if keep { 1.0 / (l * l) } else { 0.0 }),
    ))
}

/// Modified natural gradient `F_phi^+ J^T r` for the loss `0.5 ||r||^2`,
/// evaluated as `N sigma0^2 V_thin diag(mask_i / lambda_i) U^T r`.
pub fn natural_gradient_step(
    decomp: &SpectralDecomposition,
    mask: &ModificationMask,
    residual: &DVector<f64>,
    sigma0: f64,
    n_train: usize,
) -> Result<DVector<f64>> {
    let scale = check_scale(sigma0, n_train)?;
    mask.check(decomp.rank())?;
    let mut coeff = decomp.project(residual)?;
    for ((c, l), &keep) in coeff.iter_mut().zip(decomp.lambda.iter()).zip(mask.as_slice()) {
        *c = if keep { scale * *c / l } else { 0.0 };
    }
    Ok(&decomp.v * coeff)
}

/// Function-space operator `J F_phi^+ J^T = N sigma0^2 U diag(mask) U^T`.
pub fn function_space_operator(
    decomp: &SpectralDecomposition,
    mask: &ModificationMask,
    sigma0: f64,
    n_train: usize,
) -> Result<DMatrix<f64>> {
    let scale = check_scale(sigma0, n_train)?;
    mask.check(decomp.rank())?;
    let mut um = decomp.u.clone();
    for (mut col, &keep) in um.column_iter_mut().zip(mask.as_slice()) {
        col *= if keep { scale } else { 0.0 };
    }
    Ok(um * decomp.u.transpose())
}

/// Dense `P x P` MIFIM. Only for small problems; refuses above
/// [`DENSE_MIFIM_MAX_PARAMS`].
pub fn dense_mifim(
    decomp: &SpectralDecomposition,
    mask: &ModificationMask,
    sigma0: f64,
    n_train: usize,
) -> Result<DMatrix<f64>> {
    if decomp.n_params() > DENSE_MIFIM_MAX_PARAMS {
        return Err(invalid(format!(
            "refusing to materialize a {0}x{0} MIFIM (limit {DENSE_MIFIM_MAX_PARAMS})",
            decomp.n_params()
        )));
    }
    let scale = check_scale(sigma0, n_train)?;
    let phi = apply_phi(&decomp.lambda, mask)?;
    let mut vp = decomp.v.clone();
    for (mut col, w) in vp.column_iter_mut().zip(phi.iter()) {
        col *= scale * w;
    }
    Ok(vp * decomp.v.transpose())
}

/// Writes `i,lambda_sq,preserved` (1-based mode index).
pub fn write_spectrum_csv(decomp: &SpectralDecomposition, mask: &ModificationMask, path: &Path) -> Result<()> {
    mask.check(decomp.rank())?;
    let mut w = CsvWriter::create(path, &["i", "lambda_sq", "preserved"])?;
    for (i, l) in decomp.lambda.iter().enumerate() {
        w.row(&[
            (i + 1).to_string(),
            fmt_f64(l * l),
            (mask.is_preserved(i) as u8).to_string(),
        ])?;
    }
    w.finish()
}
