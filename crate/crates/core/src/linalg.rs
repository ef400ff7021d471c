//! Dense/sparse symmetric linear algebra primitives.
//!
//! Everything else in the crate builds on these: the [`SpdMatrix`] operator
//! type (dense or compressed-sparse-row storage with a lazily cached Cholesky
//! factorization), low-rank symmetric factors, weighted norms, symmetric
//! square roots, Moore-Penrose pseudoinverses, numerical rank, and
//! minimal-norm least-squares solves.
//!
//! Dense eigendecompositions and SVDs are restricted to orders at most
//! [`DENSE_DECOMPOSITION_LIMIT`]; the experiment sizes this crate targets fit
//! comfortably below it.

use std::sync::OnceLock;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::{conv, Error, Result, Scalar};

/// Largest order accepted by dense eigendecomposition/SVD based operations.
pub const DENSE_DECOMPOSITION_LIMIT: usize = 2048;

/// Largest order for which [`SpdMatrix::validate_spd`] runs the
/// smallest-eigenvalue check on dense storage; beyond it (or for sparse
/// storage) definiteness stays an assumption.
pub const SPD_VALIDATION_LIMIT: usize = 2000;

/// Relative band below zero tolerated for eigenvalues of nominally positive
/// semi-definite matrices before a not-psd error is raised.
pub const PSD_EIG_TOL: f64 = 1e-8;

fn check_dense_limit(order: usize) -> Result<()> {
    if order > DENSE_DECOMPOSITION_LIMIT {
        Err(Error::TooLargeForDense {
            order,
            limit: DENSE_DECOMPOSITION_LIMIT,
        })
    } else {
        Ok(())
    }
}

/// Replaces `m` by its symmetric part `(M + Mᵀ)/2`.
///
/// Decompositions in this crate symmetrize first so that rounding-level
/// asymmetry accumulated by iterative updates cannot leak into eigenvalue
/// routines that assume exact symmetry.
pub fn symmetrize<T: Scalar>(m: &mut DMatrix<T>) {
    let half = conv::<T>(0.5);
    let n = m.nrows();
    debug_assert_eq!(n, m.ncols(), "symmetrize requires a square matrix");
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = (m[(i, j)] + m[(j, i)]) * half;
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Returns the symmetric part of `m` without mutating the input.
pub fn symmetrized<T: Scalar>(m: &DMatrix<T>) -> DMatrix<T> {
    let mut out = m.clone();
    symmetrize(&mut out);
    out
}

// ---------------------------------------------------------------------------
// Sparse storage
// ---------------------------------------------------------------------------

/// Compressed-sparse-row storage of a symmetric matrix with the full
/// (mirrored) nonzero pattern, so matrix-vector products need no transpose
/// pass.
#[derive(Clone, Debug)]
struct CsrStorage<T> {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<T>,
}

impl<T: Scalar> CsrStorage<T> {
    /// Builds CSR storage from an already mirrored triplet list; duplicate
    /// (row, col) entries are summed.
    fn from_triplets(n: usize, triplets: &[(usize, usize, T)]) -> Self {
        let mut rows: Vec<Vec<(usize, T)>> = vec![Vec::new(); n];
        for &(i, j, v) in triplets {
            rows[i].push((j, v));
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx: Vec<usize> = Vec::with_capacity(triplets.len());
        let mut values: Vec<T> = Vec::with_capacity(triplets.len());
        row_ptr.push(0usize);
        for row in &mut rows {
            row.sort_by_key(|&(c, _)| c);
            let mut merged: Vec<(usize, T)> = Vec::with_capacity(row.len());
            for &(c, v) in row.iter() {
                match merged.last_mut() {
                    Some(last) if last.0 == c => last.1 += v,
                    _ => merged.push((c, v)),
                }
            }
            for (c, v) in merged {
                col_idx.push(c);
                values.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        CsrStorage {
            n,
            row_ptr,
            col_idx,
            values,
        }
    }

    fn mul_vec(&self, x: &DVector<T>) -> DVector<T> {
        let mut y = DVector::zeros(self.n);
        for i in 0..self.n {
            let mut acc = T::zero();
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            y[i] = acc;
        }
        y
    }

    fn to_dense(&self) -> DMatrix<T> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                m[(i, self.col_idx[k])] = self.values[k];
            }
        }
        m
    }

    fn diagonal(&self) -> DVector<T> {
        let mut d = DVector::zeros(self.n);
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                if self.col_idx[k] == i {
                    d[i] = self.values[k];
                }
            }
        }
        d
    }

    /// Sum over stored entries of `A_ij * M(j, i)`.
    fn trace_product(&self, m: &DMatrix<T>) -> T {
        let mut acc = T::zero();
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.values[k] * m[(self.col_idx[k], i)];
            }
        }
        acc
    }
}

#[derive(Clone, Debug)]
enum Storage<T> {
    Dense(DMatrix<T>),
    Sparse(CsrStorage<T>),
}

// ---------------------------------------------------------------------------
// SpdMatrix
// ---------------------------------------------------------------------------

/// Symmetric positive definite operator with dense or sparse storage and a
/// lazily cached Cholesky factorization.
///
/// Symmetry is enforced structurally: dense construction symmetrizes, sparse
/// construction mirrors the supplied triangle. Positive definiteness is
/// assumed and only checked on demand by [`SpdMatrix::validate_spd`].
pub struct SpdMatrix<T: Scalar> {
    storage: Storage<T>,
    factorization: OnceLock<Cholesky<T, Dyn>>,
}

impl<T: Scalar> Clone for SpdMatrix<T> {
    fn clone(&self) -> Self {
        SpdMatrix {
            storage: self.storage.clone(),
            factorization: OnceLock::new(),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for SpdMatrix<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let kind = match &self.storage {
            Storage::Dense(_) => "dense",
            Storage::Sparse(_) => "sparse",
        };
        write!(f, "SpdMatrix(order={}, storage={kind})", self.order())
    }
}

impl<T: Scalar> SpdMatrix<T> {
    /// Wraps a dense square matrix, replacing it by its symmetric part.
    pub fn from_dense(m: DMatrix<T>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "operator must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let mut m = m;
        symmetrize(&mut m);
        Ok(SpdMatrix {
            storage: Storage::Dense(m),
            factorization: OnceLock::new(),
        })
    }

    /// Diagonal operator with the given entries, stored sparsely.
    pub fn from_diagonal(diag: &[T]) -> Self {
        let triplets: Vec<(usize, usize, T)> = diag
            .iter()
            .enumerate()
            .map(|(i, &v)| (i, i, v))
            .collect();
        SpdMatrix {
            storage: Storage::Sparse(CsrStorage::from_triplets(diag.len(), &triplets)),
            factorization: OnceLock::new(),
        }
    }

    /// Identity operator of the given order, stored sparsely.
    pub fn identity(n: usize) -> Self {
        Self::from_diagonal(&vec![T::one(); n])
    }

    /// Builds a sparse symmetric operator from coordinate triplets that list
    /// each unordered index pair at most once per logical entry: off-diagonal
    /// triplets are mirrored automatically, duplicates are summed.
    pub fn from_coo(n: usize, entries: &[(usize, usize, T)]) -> Result<Self> {
        let mut triplets = Vec::with_capacity(entries.len() * 2);
        for &(i, j, v) in entries {
            if i >= n || j >= n {
                return Err(Error::DimensionMismatch(format!(
                    "entry index ({i}, {j}) out of range for order {n}"
                )));
            }
            triplets.push((i, j, v));
            if i != j {
                triplets.push((j, i, v));
            }
        }
        Ok(SpdMatrix {
            storage: Storage::Sparse(CsrStorage::from_triplets(n, &triplets)),
            factorization: OnceLock::new(),
        })
    }

    /// Order (row and column count) of the operator.
    pub fn order(&self) -> usize {
        match &self.storage {
            Storage::Dense(m) => m.nrows(),
            Storage::Sparse(s) => s.n,
        }
    }

    /// Whether the operator is held in dense storage.
    pub fn is_dense(&self) -> bool {
        matches!(self.storage, Storage::Dense(_))
    }

    /// Matrix-vector product `A·x`.
    ///
    /// Panics on dimension mismatch: this is the hot path of every solver and
    /// callers are expected to have validated shapes at their boundary.
    pub fn mul_vec(&self, x: &DVector<T>) -> DVector<T> {
        assert_eq!(
            x.len(),
            self.order(),
            "matrix-vector product dimension mismatch: operator order {}, vector length {}",
            self.order(),
            x.len()
        );
        match &self.storage {
            Storage::Dense(m) => m * x,
            Storage::Sparse(s) => s.mul_vec(x),
        }
    }

    /// Materializes the operator as a dense matrix.
    pub fn to_dense(&self) -> DMatrix<T> {
        match &self.storage {
            Storage::Dense(m) => m.clone(),
            Storage::Sparse(s) => s.to_dense(),
        }
    }

    /// Diagonal entries of the operator.
    pub fn diagonal(&self) -> DVector<T> {
        match &self.storage {
            Storage::Dense(m) => m.diagonal(),
            Storage::Sparse(s) => s.diagonal(),
        }
    }

    /// Trace of the product `A·M` without materializing it, exploiting the
    /// stored sparsity: `trace(A·M) = Σ_ij A_ij · M_ji`.
    pub fn trace_product(&self, m: &DMatrix<T>) -> Result<T> {
        if m.nrows() != self.order() || m.ncols() != self.order() {
            return Err(Error::DimensionMismatch(format!(
                "trace product needs a {n}x{n} argument, got {}x{}",
                m.nrows(),
                m.ncols(),
                n = self.order()
            )));
        }
        Ok(match &self.storage {
            Storage::Dense(a) => {
                let mut acc = T::zero();
                for i in 0..a.nrows() {
                    for j in 0..a.ncols() {
                        acc += a[(i, j)] * m[(j, i)];
                    }
                }
                acc
            }
            Storage::Sparse(s) => s.trace_product(m),
        })
    }

    /// Symmetric diagonal congruence `diag(s)·A·diag(s)`: entry `(i, j)` is
    /// scaled by `sᵢ·sⱼ`. The storage kind (dense or sparse pattern) is
    /// preserved.
    pub fn diag_congruence(&self, s: &DVector<T>) -> Result<SpdMatrix<T>> {
        if s.len() != self.order() {
            return Err(Error::DimensionMismatch(format!(
                "scaling vector length {} does not match operator order {}",
                s.len(),
                self.order()
            )));
        }
        let storage = match &self.storage {
            Storage::Dense(m) => {
                let mut out = m.clone();
                for j in 0..out.ncols() {
                    for i in 0..out.nrows() {
                        out[(i, j)] *= s[i] * s[j];
                    }
                }
                Storage::Dense(out)
            }
            Storage::Sparse(c) => {
                let mut out = c.clone();
                for i in 0..out.n {
                    for k in out.row_ptr[i]..out.row_ptr[i + 1] {
                        out.values[k] *= s[i] * s[out.col_idx[k]];
                    }
                }
                Storage::Sparse(out)
            }
        };
        Ok(SpdMatrix {
            storage,
            factorization: OnceLock::new(),
        })
    }

    /// Validates positive definiteness where feasible: dense storage of order
    /// at most [`SPD_VALIDATION_LIMIT`] gets a smallest-eigenvalue check;
    /// anything else passes by assumption (definiteness remains the caller's
    /// contract).
    pub fn validate_spd(&self) -> Result<()> {
        if let Storage::Dense(m) = &self.storage {
            if m.nrows() <= SPD_VALIDATION_LIMIT {
                let eig = SymmetricEigen::new(m.clone());
                let min = eig.eigenvalues.iter().copied().fold(T::max_value().unwrap(), T::min);
                if min <= T::zero() {
                    return Err(Error::NotPsd(format!(
                        "smallest eigenvalue {min:e} is not positive"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Lazily computed Cholesky factorization `A = L·Lᵀ`, cached for the
    /// lifetime of the value. Sparse storage is densified first (subject to
    /// the dense-order limit); that one-time cost buys direct solves for
    /// inverse-prior products without ever forming an explicit inverse.
    pub fn factorization(&self) -> Result<&Cholesky<T, Dyn>> {
        if let Some(f) = self.factorization.get() {
            return Ok(f);
        }
        check_dense_limit(self.order())?;
        let dense = self.to_dense();
        let chol = Cholesky::new(dense).ok_or_else(|| {
            Error::NotPsd("Cholesky factorization failed: matrix is not positive definite".into())
        })?;
        let _ = self.factorization.set(chol);
        Ok(self.factorization.get().expect("factorization was just cached"))
    }

    /// Solves `A·y = rhs` through the cached Cholesky factorization.
    pub fn solve(&self, rhs: &DVector<T>) -> Result<DVector<T>> {
        if rhs.len() != self.order() {
            return Err(Error::DimensionMismatch(format!(
                "solve rhs length {} does not match operator order {}",
                rhs.len(),
                self.order()
            )));
        }
        Ok(self.factorization()?.solve(rhs))
    }
}

// ---------------------------------------------------------------------------
// SymFactor
// ---------------------------------------------------------------------------

/// Low-rank symmetric factor `F` (n×ℓ, ℓ ≤ n) representing `S = F·Fᵀ`, which
/// is symmetric positive semi-definite by construction.
#[derive(Clone, Debug)]
pub struct SymFactor<T: Scalar> {
    f: DMatrix<T>,
}

impl<T: Scalar> SymFactor<T> {
    /// Wraps a factor matrix; the represented operator is `F·Fᵀ`.
    pub fn new(f: DMatrix<T>) -> Self {
        SymFactor { f }
    }

    /// The factor matrix `F`.
    pub fn factor(&self) -> &DMatrix<T> {
        &self.f
    }

    /// Consumes the wrapper and returns `F`.
    pub fn into_factor(self) -> DMatrix<T> {
        self.f
    }

    /// Row count of `F` = order of the represented operator.
    pub fn order(&self) -> usize {
        self.f.nrows()
    }

    /// Column count of `F`, an upper bound on the rank of `F·Fᵀ`.
    pub fn width(&self) -> usize {
        self.f.ncols()
    }

    /// Materializes `S = F·Fᵀ` densely.
    pub fn reconstruct(&self) -> DMatrix<T> {
        &self.f * self.f.transpose()
    }
}

// ---------------------------------------------------------------------------
// Free operations
// ---------------------------------------------------------------------------

/// Weighted inner product `xᵀ·A·y`.
pub fn a_inner<T: Scalar>(a: &SpdMatrix<T>, x: &DVector<T>, y: &DVector<T>) -> Result<T> {
    if x.len() != a.order() || y.len() != a.order() {
        return Err(Error::DimensionMismatch(format!(
            "weighted inner product needs length-{} vectors, got {} and {}",
            a.order(),
            x.len(),
            y.len()
        )));
    }
    Ok(x.dot(&a.mul_vec(y)))
}

/// Weighted norm `‖x‖_A = sqrt(xᵀAx)`.
///
/// Never negative; rounding-level negative quadratic forms are clamped to 0.
pub fn a_norm<T: Scalar>(a: &SpdMatrix<T>, x: &DVector<T>) -> Result<T> {
    let q = a_inner(a, x, x)?;
    Ok(q.max(T::zero()).sqrt())
}

/// Symmetric positive semi-definite square root via eigendecomposition.
///
/// Eigenvalues in the rounding band `[−tol, 0)` with `tol = 1e−8·‖S‖₂` are
/// clamped to zero; anything below the band is a genuine indefiniteness and
/// raises a not-psd error. The returned `R` is symmetric and satisfies
/// `‖R·R − S‖_F ≤ 1e−10·(1 + ‖S‖_F)`.
pub fn sym_sqrt<T: Scalar>(s: &DMatrix<T>) -> Result<DMatrix<T>> {
    if s.nrows() != s.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "symmetric square root needs a square matrix, got {}x{}",
            s.nrows(),
            s.ncols()
        )));
    }
    check_dense_limit(s.nrows())?;
    let sym = symmetrized(s);
    let eig = SymmetricEigen::new(sym);
    let spectral_norm = eig
        .eigenvalues
        .iter()
        .fold(T::zero(), |acc, &l| acc.max(l.abs()));
    let tol = conv::<T>(PSD_EIG_TOL) * spectral_norm;
    let mut sqrt_eigs = eig.eigenvalues.clone();
    for l in sqrt_eigs.iter_mut() {
        if *l < -tol {
            return Err(Error::NotPsd(format!(
                "eigenvalue {:e} below the psd tolerance -{tol:e}",
                *l
            )));
        }
        *l = l.max(T::zero()).sqrt();
    }
    let q = &eig.eigenvectors;
    let mut r = q * DMatrix::from_diagonal(&sqrt_eigs) * q.transpose();
    symmetrize(&mut r);
    Ok(r)
}

/// Rank-decision threshold used by [`numerical_rank`], [`pseudo_inverse`], and
/// [`min_norm_solve`]: `n·ε·‖S‖₂` with ε the working-precision machine
/// epsilon and `‖S‖₂` the largest singular value.
fn rank_threshold<T: Scalar>(n: usize, singular_values: &DVector<T>) -> T {
    let sigma_max = singular_values
        .iter()
        .fold(T::zero(), |acc, &s| acc.max(s));
    conv::<T>(n as f64) * T::machine_eps() * sigma_max
}

/// Numerical rank: the number of singular values exceeding `n·ε·‖S‖₂`.
pub fn numerical_rank<T: Scalar>(s: &DMatrix<T>) -> usize {
    let n = s.nrows().max(s.ncols());
    let svd = s.clone().svd(false, false);
    let tol = rank_threshold(n, &svd.singular_values);
    svd.singular_values.iter().filter(|&&sv| sv > tol).count()
}

/// Moore-Penrose pseudoinverse of a symmetric matrix via SVD, inverting only
/// singular values above the numerical-rank threshold (or `rank_tol` when
/// supplied).
pub fn pseudo_inverse<T: Scalar>(s: &DMatrix<T>, rank_tol: Option<T>) -> Result<DMatrix<T>> {
    if s.nrows() != s.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "pseudoinverse expects a square symmetric matrix, got {}x{}",
            s.nrows(),
            s.ncols()
        )));
    }
    check_dense_limit(s.nrows())?;
    let n = s.nrows();
    let sym = symmetrized(s);
    let svd = sym.svd(true, true);
    let tol = rank_tol.unwrap_or_else(|| rank_threshold(n, &svd.singular_values));
    let u = svd.u.as_ref().expect("SVD was computed with U requested");
    let v_t = svd.v_t.as_ref().expect("SVD was computed with Vᵀ requested");
    let mut inv_sigma = svd.singular_values.clone();
    for sv in inv_sigma.iter_mut() {
        *sv = if *sv > tol { T::one() / *sv } else { T::zero() };
    }
    // S† = V · Σ† · Uᵀ
    Ok(v_t.transpose() * DMatrix::from_diagonal(&inv_sigma) * u.transpose())
}

/// Minimum-2-norm least-squares solution `q = S†·y` of `min ‖y − S·u‖₂`,
/// computed from the SVD without materializing the pseudoinverse.
pub fn min_norm_solve<T: Scalar>(s: &DMatrix<T>, y: &DVector<T>) -> Result<DVector<T>> {
    min_norm_solve_with_rank(s, y).map(|(q, _)| q)
}

/// [`min_norm_solve`] variant that also reports the numerical rank counted
/// from the same decomposition with the same threshold as
/// [`numerical_rank`], so callers needing both pay for one SVD.
pub fn min_norm_solve_with_rank<T: Scalar>(
    s: &DMatrix<T>,
    y: &DVector<T>,
) -> Result<(DVector<T>, usize)> {
    if s.nrows() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "least-squares rhs length {} does not match row count {}",
            y.len(),
            s.nrows()
        )));
    }
    let n = s.nrows().max(s.ncols());
    let svd = symmetrized(s).svd(true, true);
    let tol = rank_threshold(n, &svd.singular_values);
    let u = svd.u.as_ref().expect("SVD was computed with U requested");
    let v_t = svd.v_t.as_ref().expect("SVD was computed with Vᵀ requested");
    let mut rank = 0usize;
    let mut coeffs = u.transpose() * y;
    for (c, sv) in coeffs.iter_mut().zip(svd.singular_values.iter()) {
        if *sv > tol {
            *c /= *sv;
            rank += 1;
        } else {
            *c = T::zero();
        }
    }
    Ok((v_t.transpose() * coeffs, rank))
}

/// Largest and smallest absolute eigenvalues of a symmetric matrix, the
/// ingredients of its spectral condition number.
pub fn sym_extreme_abs_eigs<T: Scalar>(m: &DMatrix<T>) -> Result<(T, T)> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "eigenvalue extremes need a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    check_dense_limit(m.nrows())?;
    let eig = SymmetricEigen::new(symmetrized(m));
    let mut max = T::zero();
    let mut min = T::max_value().unwrap();
    for &l in eig.eigenvalues.iter() {
        let a = l.abs();
        max = max.max(a);
        min = min.min(a);
    }
    Ok((max, min))
}
