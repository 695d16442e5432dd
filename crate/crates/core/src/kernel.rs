//! Gram-block algebra for normalized kernels.
//!
//! Every kernel in this crate is *normalized*: `k(x, x) = 1` for all inputs.
//! That makes Gram diagonals exactly one, keeps per-node spectra on a common
//! scale, and lets penalty floors derived from local eigenvalues transfer
//! across nodes of different sizes.
//!
//! The unit of data exchange between modules is the [`GramBlock`]: the kernel
//! matrix between the sample sets of an ordered pair of owners. Blocks are
//! evaluated by [`gram`], double-centered by [`center`] (the feature-space
//! analogue of subtracting per-owner column means), and made invertible by
//! [`factor`], which wraps a Cholesky factorization of `K + jitter·I`.
//!
//! Determinism contract: all entry loops and reductions run in a fixed order,
//! so two evaluations of the same block on the same data are bitwise
//! identical, and `gram(a, b)` is the bitwise transpose of `gram(b, a)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Kernel function choices. All variants are normalized so `k(x, x) = 1`.
#[derive(Debug, Clone, PartialEq)]
pub enum KernelSpec {
    /// Gaussian radial basis function `exp(-gamma · ‖x − y‖²)`.
    Rbf {
        /// Bandwidth parameter; must be positive and finite.
        gamma: f64,
    },
    /// Cosine similarity `⟨x, y⟩ / (‖x‖·‖y‖)` — the linear kernel divided by
    /// its self-kernels.
    NormalizedLinear,
    /// `(⟨x, y⟩ + coef)^degree` divided by the corresponding self-kernels.
    NormalizedPolynomial {
        /// Polynomial degree; must be at least 1.
        degree: u32,
        /// Additive constant; must be non-negative and finite.
        coef: f64,
    },
}

impl KernelSpec {
    /// Checks parameter ranges.
    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::Rbf { gamma } => {
                if !(gamma.is_finite() && gamma > 0.0) {
                    return Err(Error::InvalidKernelParameter(format!(
                        "rbf gamma must be positive and finite, got {gamma}"
                    )));
                }
            }
            KernelSpec::NormalizedLinear => {}
            KernelSpec::NormalizedPolynomial { degree, coef } => {
                if degree == 0 {
                    return Err(Error::InvalidKernelParameter(
                        "polynomial degree must be at least 1".into(),
                    ));
                }
                if !(coef.is_finite() && coef >= 0.0) {
                    return Err(Error::InvalidKernelParameter(format!(
                        "polynomial coefficient must be non-negative and finite, got {coef}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Kernel matrix between the sample sets of two owners.
///
/// `values[(p, q)] = k(a_p, b_q)` where `a` are the samples of `rows_owner`
/// and `b` those of `cols_owner`. A block with `rows_owner == cols_owner` is a
/// node's own (square, symmetric) kernel matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GramBlock {
    /// Owner of the samples indexing the rows.
    pub rows_owner: usize,
    /// Owner of the samples indexing the columns.
    pub cols_owner: usize,
    /// The kernel values.
    pub values: DMatrix<f64>,
}

impl GramBlock {
    /// Builds a block from parts without recomputing kernel values.
    pub fn new(rows_owner: usize, cols_owner: usize, values: DMatrix<f64>) -> Self {
        GramBlock {
            rows_owner,
            cols_owner,
            values,
        }
    }

    /// Number of row samples.
    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    /// Number of column samples.
    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    /// The same block with owners and values transposed.
    pub fn transposed(&self) -> GramBlock {
        GramBlock {
            rows_owner: self.cols_owner,
            cols_owner: self.rows_owner,
            values: self.values.transpose(),
        }
    }

    /// Mean of the diagonal; scale reference for relative jitter.
    ///
    /// Returns zero for an empty block.
    pub fn mean_diagonal(&self) -> f64 {
        let n = self.nrows().min(self.ncols());
        if n == 0 {
            return 0.0;
        }
        let mut t = 0.0;
        for i in 0..n {
            t += self.values[(i, i)];
        }
        t / n as f64
    }

    /// Maximum absolute asymmetry `max |K[i,j] − K[j,i]|` of a square block.
    fn max_asymmetry(&self) -> f64 {
        let n = self.nrows();
        let mut worst = 0.0f64;
        for j in 0..n {
            for i in (j + 1)..n {
                worst = worst.max((self.values[(i, j)] - self.values[(j, i)]).abs());
            }
        }
        worst
    }
}

/// Dot product over equal-length slices, accumulated in index order.
#[inline]
fn dot(xs: &[f64], ys: &[f64]) -> f64 {
    debug_assert_eq!(xs.len(), ys.len());
    let mut s = 0.0;
    for i in 0..xs.len() {
        s += xs[i] * ys[i];
    }
    s
}

/// Column `p` of a column-major matrix as a slice.
#[inline]
fn col(data: &[f64], nrows: usize, p: usize) -> &[f64] {
    &data[p * nrows..(p + 1) * nrows]
}

/// Squared Euclidean norms of each column, with finiteness check.
fn column_sq_norms(owner: usize, m: &DMatrix<f64>) -> Result<Vec<f64>> {
    let data = m.as_slice();
    let nr = m.nrows();
    let mut out = Vec::with_capacity(m.ncols());
    for p in 0..m.ncols() {
        let c = col(data, nr, p);
        for (k, v) in c.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!(
                    "sample {p} of owner {owner} has non-finite feature {k}"
                )));
            }
        }
        out.push(dot(c, c));
    }
    Ok(out)
}

/// Evaluates the Gram block between two sample sets.
///
/// `a` and `b` hold one sample per column and must agree on the feature
/// dimension (row count). When `rows_owner == cols_owner` the caller asserts
/// that `a` and `b` are the same sample set; the diagonal is then set to
/// exactly `1.0` and the strict triangles are mirrored, so the block is
/// bitwise symmetric.
///
/// Errors: dimension mismatch, non-finite features, and (for the kernels that
/// divide by self-kernels) zero or non-positive self-kernel values.
pub fn gram(
    spec: &KernelSpec,
    rows_owner: usize,
    a: &DMatrix<f64>,
    cols_owner: usize,
    b: &DMatrix<f64>,
) -> Result<GramBlock> {
    spec.validate()?;
    if a.nrows() != b.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "feature dimension of owner {rows_owner} is {} but owner {cols_owner} has {}",
            a.nrows(),
            b.nrows()
        )));
    }
    if a.ncols() == 0 || b.ncols() == 0 {
        return Err(Error::DimensionMismatch(format!(
            "empty sample set in gram evaluation ({rows_owner}, {cols_owner})"
        )));
    }
    let sa = column_sq_norms(rows_owner, a)?;
    let sb = column_sq_norms(cols_owner, b)?;

    // Self-kernel validity for the normalizing kernels.
    match *spec {
        KernelSpec::Rbf { .. } => {}
        KernelSpec::NormalizedLinear => {
            for (owner, s) in [(rows_owner, &sa), (cols_owner, &sb)] {
                if let Some(p) = s.iter().position(|&v| v <= 0.0) {
                    return Err(Error::Normalization(format!(
                        "sample {p} of owner {owner} has zero norm; \
                         normalized linear kernel undefined"
                    )));
                }
            }
        }
        KernelSpec::NormalizedPolynomial { degree, coef } => {
            for (owner, s) in [(rows_owner, &sa), (cols_owner, &sb)] {
                for (p, &v) in s.iter().enumerate() {
                    if (v + coef).powi(degree as i32) <= 0.0 {
                        return Err(Error::Normalization(format!(
                            "sample {p} of owner {owner} has non-positive self-kernel; \
                             normalized polynomial kernel undefined"
                        )));
                    }
                }
            }
        }
    }

    let same_owner = rows_owner == cols_owner;
    if same_owner && a.ncols() != b.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "owner {rows_owner} paired with itself but sample counts differ ({} vs {})",
            a.ncols(),
            b.ncols()
        )));
    }

    let na = a.ncols();
    let nb = b.ncols();
    let nr = a.nrows();
    let ad = a.as_slice();
    let bd = b.as_slice();
    let mut values = DMatrix::<f64>::zeros(na, nb);

    let entry = |p: usize, q: usize| -> f64 {
        let g = dot(col(ad, nr, p), col(bd, nr, q));
        match *spec {
            KernelSpec::Rbf { gamma } => {
                // Expansion ‖x−y‖² = ‖x‖² + ‖y‖² − 2⟨x,y⟩, clamped at zero so
                // rounding can never produce a "distance" below zero.
                let d2 = (sa[p] + sb[q] - 2.0 * g).max(0.0);
                (-gamma * d2).exp()
            }
            KernelSpec::NormalizedLinear => {
                // Bitwise-identical inputs give g == sa == sb; short-circuit
                // to exactly 1 so normalization noise cannot leak in.
                if g == sa[p] && g == sb[q] {
                    1.0
                } else {
                    g / (sa[p].sqrt() * sb[q].sqrt())
                }
            }
            KernelSpec::NormalizedPolynomial { degree, coef } => {
                let base = (g + coef).powi(degree as i32);
                let kaa = (sa[p] + coef).powi(degree as i32);
                let kbb = (sb[q] + coef).powi(degree as i32);
                if base == kaa && base == kbb {
                    1.0
                } else {
                    base / (kaa.sqrt() * kbb.sqrt())
                }
            }
        }
    };

    if same_owner {
        // Lower triangle once, mirrored; exact unit diagonal.
        for q in 0..nb {
            values[(q, q)] = 1.0;
            for p in (q + 1)..na {
                let v = entry(p, q);
                values[(p, q)] = v;
                values[(q, p)] = v;
            }
        }
    } else {
        for q in 0..nb {
            for p in 0..na {
                values[(p, q)] = entry(p, q);
            }
        }
    }

    Ok(GramBlock {
        rows_owner,
        cols_owner,
        values,
    })
}

/// Double-centers a Gram block.
///
/// Subtracts row means, column means, and adds back the grand mean:
///
/// ```text
/// Kc[i,j] = K[i,j] − rowmean[i] − colmean[j] + grandmean
/// ```
///
/// This equals the Gram block of the same kernel's feature vectors after each
/// owner subtracts its own feature mean, so centered blocks of different
/// owner pairs remain mutually consistent. Centering is idempotent up to
/// floating-point noise. For square blocks with equal owners the result is
/// made bitwise symmetric by computing one triangle and mirroring.
pub fn center(block: &GramBlock) -> GramBlock {
    let m = block.nrows();
    let n = block.ncols();
    let v = &block.values;

    // Column sums accumulated down each (contiguous) column; row sums
    // accumulated across columns in ascending order.
    let mut col_mean = vec![0.0f64; n];
    let mut row_mean = vec![0.0f64; m];
    let data = v.as_slice();
    for q in 0..n {
        let c = col(data, m, q);
        let mut s = 0.0;
        for (i, &x) in c.iter().enumerate() {
            s += x;
            row_mean[i] += x;
        }
        col_mean[q] = s / m as f64;
    }
    let mut grand = 0.0;
    for r in row_mean.iter_mut() {
        grand += *r;
        *r /= n as f64;
    }
    grand /= (m * n) as f64;

    let mut out = DMatrix::<f64>::zeros(m, n);
    if block.rows_owner == block.cols_owner && m == n {
        for q in 0..n {
            for p in q..m {
                let c = v[(p, q)] - row_mean[p] - col_mean[q] + grand;
                out[(p, q)] = c;
                out[(q, p)] = c;
            }
        }
    } else {
        for q in 0..n {
            for p in 0..m {
                out[(p, q)] = v[(p, q)] - row_mean[p] - col_mean[q] + grand;
            }
        }
    }

    GramBlock {
        rows_owner: block.rows_owner,
        cols_owner: block.cols_owner,
        values: out,
    }
}

/// Cholesky-backed solver for a symmetric positive-definite system.
///
/// Factors `A + jitter·I = L·Lᵀ` eagerly and reports the failing pivot if the
/// matrix (after jitter) is not positive definite. The factorization is a
/// plain right-looking Cholesky with fixed loop order, so it is deterministic
/// across runs and thread counts.
#[derive(Debug, Clone)]
pub struct SpdSolver {
    n: usize,
    /// Lower factor, column-major, dense (upper triangle zero).
    l: Vec<f64>,
}

impl SpdSolver {
    /// Factors `a + jitter·I`. `context` names the matrix in error messages.
    pub fn factor(a: &DMatrix<f64>, jitter: f64, context: &str) -> Result<SpdSolver> {
        let n = a.nrows();
        if n != a.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "{context}: cannot factor non-square {}x{} matrix",
                a.nrows(),
                a.ncols()
            )));
        }
        if !jitter.is_finite() || jitter < 0.0 {
            return Err(Error::InvalidKernelParameter(format!(
                "{context}: jitter must be finite and non-negative, got {jitter}"
            )));
        }
        let src = a.as_slice();
        let mut l = vec![0.0f64; n * n];
        for j in 0..n {
            let mut d = src[j * n + j] + jitter;
            for k in 0..j {
                let ljk = l[k * n + j];
                d -= ljk * ljk;
            }
            if !(d.is_finite() && d > 0.0) {
                return Err(Error::Factorization {
                    context: context.to_string(),
                    pivot: d,
                    index: j,
                });
            }
            let dj = d.sqrt();
            l[j * n + j] = dj;
            for i in (j + 1)..n {
                let mut s = src[j * n + i];
                for k in 0..j {
                    s -= l[k * n + i] * l[k * n + j];
                }
                l[j * n + i] = s / dj;
            }
        }
        Ok(SpdSolver { n, l })
    }

    /// Dimension of the factored matrix.
    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solves `(A + jitter·I)·x = rhs`.
    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        assert_eq!(rhs.len(), self.n, "rhs length mismatch in SpdSolver::solve");
        let mut x = rhs.clone();
        self.solve_in_place(x.as_mut_slice());
        x
    }

    /// Solves against every column of `rhs`.
    pub fn solve_matrix(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(
            rhs.nrows(),
            self.n,
            "rhs row count mismatch in SpdSolver::solve_matrix"
        );
        let mut x = rhs.clone();
        let n = self.n;
        for q in 0..x.ncols() {
            let data = x.as_mut_slice();
            self.solve_in_place(&mut data[q * n..(q + 1) * n]);
        }
        x
    }

    fn solve_in_place(&self, x: &mut [f64]) {
        let n = self.n;
        let l = &self.l;
        // Forward: L y = rhs.
        for j in 0..n {
            let yj = x[j] / l[j * n + j];
            x[j] = yj;
            for i in (j + 1)..n {
                x[i] -= l[j * n + i] * yj;
            }
        }
        // Backward: Lᵀ x = y.
        for j in (0..n).rev() {
            let mut s = x[j];
            for i in (j + 1)..n {
                s -= l[j * n + i] * x[i];
            }
            x[j] = s / l[j * n + j];
        }
    }

    /// Solves the lower-triangular system `L·y = rhs` (half of a full solve).
    pub(crate) fn solve_lower(&self, rhs: &DVector<f64>) -> DVector<f64> {
        assert_eq!(rhs.len(), self.n);
        let n = self.n;
        let l = &self.l;
        let mut x = rhs.clone();
        for j in 0..n {
            let yj = x[j] / l[j * n + j];
            x[j] = yj;
            for i in (j + 1)..n {
                x[i] -= l[j * n + i] * yj;
            }
        }
        x
    }

    /// Solves the upper-triangular system `Lᵀ·x = rhs`.
    pub(crate) fn solve_lower_transpose(&self, rhs: &DVector<f64>) -> DVector<f64> {
        assert_eq!(rhs.len(), self.n);
        let n = self.n;
        let l = &self.l;
        let mut x = rhs.clone();
        for j in (0..n).rev() {
            let mut s = x[j];
            for i in (j + 1)..n {
                s -= l[j * n + i] * x[i];
            }
            x[j] = s / l[j * n + j];
        }
        x
    }
}

/// A centered kernel block bundled with a ridge-stabilized solver for it.
///
/// Solving against `K + jitter·I` is how every "apply `K⁻¹`" in the consensus
/// updates is realized; the jitter keeps the system positive definite even
/// though centering always introduces a zero eigenvalue.
#[derive(Debug, Clone)]
pub struct FactoredKernel {
    /// The (square) kernel block that was factored.
    pub block: GramBlock,
    /// Ridge added to the diagonal before factoring.
    pub jitter: f64,
    solver: SpdSolver,
}

/// Symmetry tolerance accepted by [`factor`].
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Factors `block.values + jitter·I` for repeated solves.
///
/// The block must be square and symmetric to within [`SYMMETRY_TOL`].
pub fn factor(block: &GramBlock, jitter: f64) -> Result<FactoredKernel> {
    if block.nrows() != block.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "kernel block ({}, {}) is {}x{}, cannot factor",
            block.rows_owner,
            block.cols_owner,
            block.nrows(),
            block.ncols()
        )));
    }
    let asym = block.max_asymmetry();
    if asym > SYMMETRY_TOL {
        return Err(Error::NotSymmetric(format!(
            "kernel block ({}, {}) asymmetry {asym:e} exceeds {SYMMETRY_TOL:e}",
            block.rows_owner, block.cols_owner
        )));
    }
    let context = format!("kernel block of owner {}", block.rows_owner);
    let solver = SpdSolver::factor(&block.values, jitter, &context)?;
    Ok(FactoredKernel {
        block: block.clone(),
        jitter,
        solver,
    })
}

impl FactoredKernel {
    /// Solves `(K + jitter·I)·x = rhs`.
    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.solver.solve(rhs)
    }

    /// Solves against every column of `rhs`.
    pub fn solve_matrix(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.solver.solve_matrix(rhs)
    }

    /// Dimension of the factored block.
    pub fn dim(&self) -> usize {
        self.solver.dim()
    }
}

/// Relative-to-scale jitter: `factor · mean(diag(block))`.
///
/// Normalized kernels have unit raw diagonals, so for uncentered blocks this
/// is simply `factor`; after centering the diagonal mean reflects the
/// retained variance and the jitter scales with it.
pub fn relative_jitter(block: &GramBlock, factor: f64) -> f64 {
    factor * block.mean_diagonal().abs()
}
