//! Centralized kernel-PCA reference solver.
//!
//! Computes the leading eigenpair `(λ₁, v)` of a centered Gram matrix and
//! rescales the eigenvector to kernel-PCA coefficients `α = v / √λ₁`, so that
//! the implied feature-space component `w = Σᵢ αᵢ ψ(xᵢ)` has unit norm
//! (`αᵀKα = 1`). Every decentralized run in this crate is evaluated against
//! this solution.
//!
//! Up to [`FULL_EIG_MAX`] samples the full symmetric eigendecomposition is
//! used; beyond that a deterministic power iteration on the (PSD) centered
//! Gram matrix extracts the top eigenpair.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::kernel::GramBlock;

/// Largest sample count solved by full eigendecomposition; larger systems use
/// power iteration.
pub const FULL_EIG_MAX: usize = 2000;

/// Top eigenvalue below this is treated as a degenerate (rank-zero) spectrum.
pub const DEGENERATE_TOL: f64 = 1e-10;

/// Eigenvalues within this distance of the maximum count as tied; ties are
/// broken by a deterministic eigenvector ordering rule.
const TIE_TOL: f64 = 1e-10;

/// Relative residual tolerance of the power iteration.
const POWER_TOL: f64 = 1e-10;

/// Iteration budget of the power iteration.
const POWER_MAX_ITERS: usize = 10_000;

/// Fixed seed for the power iteration's start vector; part of the
/// crate's determinism contract.
const POWER_SEED: u64 = 0x5eed_0f_d0e5_ca1e;

/// Result of the centralized solve.
#[derive(Debug, Clone)]
pub struct CentralSolution {
    /// The centered Gram matrix that was solved.
    pub kernel: GramBlock,
    /// Top eigenvalue of the centered Gram matrix.
    pub lambda1: f64,
    /// Kernel-PCA coefficients: top eigenvector scaled by `1/√λ₁`.
    pub alpha: DVector<f64>,
}

/// Flips `v` so its first entry of non-negligible magnitude is positive.
///
/// "Non-negligible" means at least `1e-12` times the largest magnitude.
/// Returns `v` unchanged if it is exactly zero.
pub(crate) fn fix_sign(mut v: DVector<f64>) -> DVector<f64> {
    let maxabs = v.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    if maxabs == 0.0 {
        return v;
    }
    let thresh = 1e-12 * maxabs;
    for i in 0..v.len() {
        if v[i].abs() > thresh {
            if v[i] < 0.0 {
                v.neg_mut();
            }
            break;
        }
    }
    v
}

/// Selects the top eigenpair from a full decomposition with deterministic
/// tie-breaking.
///
/// Among eigenvalues within [`TIE_TOL`] of the maximum, the chosen vector is
/// the one whose first entry of maximal magnitude has the lowest index;
/// remaining ties go to the lower eigenvector column index. The returned
/// vector is sign-fixed (first non-negligible entry positive).
pub(crate) fn pick_top(
    eigenvalues: &DVector<f64>,
    eigenvectors: &DMatrix<f64>,
) -> (f64, DVector<f64>) {
    let lambda_max = eigenvalues.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let mut best: Option<(usize, usize)> = None; // (first-max entry index, column)
    for c in 0..eigenvalues.len() {
        if eigenvalues[c] < lambda_max - TIE_TOL {
            continue;
        }
        let colv = eigenvectors.column(c);
        let maxabs = colv.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
        let first = colv
            .iter()
            .position(|&x| x.abs() == maxabs)
            .unwrap_or(0);
        let key = (first, c);
        if best.is_none_or(|b| key < b) {
            best = Some(key);
        }
    }
    let (_, col) = best.expect("nonempty spectrum");
    (
        eigenvalues[col],
        fix_sign(eigenvectors.column(col).into_owned()),
    )
}

fn check_square_symmetric(k: &GramBlock) -> Result<()> {
    let n = k.nrows();
    if n != k.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "central solve needs a square Gram matrix, got {}x{}",
            k.nrows(),
            k.ncols()
        )));
    }
    let mut worst = 0.0f64;
    for j in 0..n {
        for i in (j + 1)..n {
            worst = worst.max((k.values[(i, j)] - k.values[(j, i)]).abs());
        }
    }
    if worst > 1e-10 {
        return Err(Error::NotSymmetric(format!(
            "central solve input asymmetry {worst:e} exceeds 1e-10"
        )));
    }
    Ok(())
}

/// Deterministic power iteration for the top eigenpair of a PSD matrix.
///
/// Starts from a fixed-seed Gaussian vector and iterates until the relative
/// eigen-residual `‖Kv − λv‖ ≤ tol·λ` or the iteration budget is exhausted.
fn power_top(k: &DMatrix<f64>) -> Result<(f64, DVector<f64>)> {
    let n = k.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(POWER_SEED);
    let mut v = DVector::<f64>::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let norm = v.norm();
    if norm == 0.0 {
        return Err(Error::DegenerateSpectrum("zero start vector".into()));
    }
    v /= norm;
    for _ in 0..POWER_MAX_ITERS {
        let w = k * &v;
        let lambda = v.dot(&w);
        let resid = (&w - &v * lambda).norm();
        let wn = w.norm();
        if wn <= DEGENERATE_TOL {
            return Err(Error::DegenerateSpectrum(format!(
                "power iteration collapsed: ‖Kv‖ = {wn:e}"
            )));
        }
        v = w / wn;
        if resid <= POWER_TOL * lambda.abs().max(f64::MIN_POSITIVE) {
            return Ok((lambda, fix_sign(v)));
        }
    }
    Err(Error::NoConvergence(format!(
        "power iteration exceeded {POWER_MAX_ITERS} iterations"
    )))
}

/// Top eigenpair `(λ₁, v)` of a symmetric PSD matrix with `‖v‖ = 1`.
///
/// Dispatches between full eigendecomposition and power iteration on
/// [`FULL_EIG_MAX`]. Fails with [`Error::DegenerateSpectrum`] when the top
/// eigenvalue does not exceed [`DEGENERATE_TOL`].
pub fn top_eigenpair(k: &DMatrix<f64>) -> Result<(f64, DVector<f64>)> {
    let n = k.nrows();
    if n == 0 {
        return Err(Error::DimensionMismatch("empty matrix".into()));
    }
    let (lambda, v) = if n <= FULL_EIG_MAX {
        let eig = k.clone().symmetric_eigen();
        pick_top(&eig.eigenvalues, &eig.eigenvectors)
    } else {
        power_top(k)?
    };
    if lambda <= DEGENERATE_TOL {
        return Err(Error::DegenerateSpectrum(format!(
            "top eigenvalue {lambda:e} is not above {DEGENERATE_TOL:e}"
        )));
    }
    Ok((lambda, v))
}

/// Solves centralized kernel PCA on a centered Gram matrix.
///
/// The input must be square and symmetric (checked); it is expected to be a
/// centered, positive semidefinite Gram matrix (not checked). The returned
/// coefficients satisfy `αᵀKα = 1` up to floating-point error.
pub fn solve_central(kernel: &GramBlock) -> Result<CentralSolution> {
    check_square_symmetric(kernel)?;
    let (lambda1, v) = top_eigenpair(&kernel.values)?;
    let alpha = v / lambda1.sqrt();
    Ok(CentralSolution {
        kernel: kernel.clone(),
        lambda1,
        alpha,
    })
}

/// Projects new points onto the learned component.
///
/// `cross` holds kernel values between the training samples (rows) and the
/// new points (columns); the projection of new point `q` is
/// `Σᵢ αᵢ · cross[(i, q)]`.
pub fn project_new(solution: &CentralSolution, cross: &GramBlock) -> Result<DVector<f64>> {
    if cross.nrows() != solution.alpha.len() {
        return Err(Error::DimensionMismatch(format!(
            "cross block has {} training rows but solution has {} coefficients",
            cross.nrows(),
            solution.alpha.len()
        )));
    }
    Ok(cross.values.tr_mul(&solution.alpha))
}
