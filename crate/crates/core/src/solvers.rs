//! Iterative solvers for symmetric positive definite systems `A·x = b`.
//!
//! The module houses plain conjugate gradients ([`cg`]), Bayesian CG under a
//! general prior in iterative ([`bayescg`]), direct
//! ([`bayescg_posterior_direct`]), factored ([`bayescg_factored`]), and
//! random-search-direction ([`bayescg_random_directions`]) forms, a
//! twice-reorthogonalized Lanczos basis builder ([`modified_lanczos`]), and
//! the Krylov-prior solvers with full ([`krylov_full`]) or rank-limited
//! ([`krylov_approx`]) posteriors.
//!
//! Every solver is single-threaded per call, reentrant, and deterministic;
//! matrix-vector products use sequential reductions.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::gaussian::{Gaussian, KrylovCov, RandomSource};
use crate::linalg::{self, SpdMatrix, SymFactor, DENSE_DECOMPOSITION_LIMIT};
use crate::{conv, Error, Result, Scalar};

/// Search directions whose information content `sᵀAΣ₀As` falls below this
/// fraction of `‖r₀‖₂²` trigger a breakdown error.
pub const BAYESCG_BREAKDOWN_RELTOL: f64 = 1e-14;

/// Iterations stop early (cleanly, not as an error) once the residual norm
/// falls below this fraction of its initial value; continuing past machine
/// convergence only manufactures noise directions.
pub const CONVERGED_RESIDUAL_RELTOL: f64 = 1e-14;

/// Default absolute breakdown tolerance on the weighted norm of a Lanczos
/// candidate vector; reaching it means the Krylov space stopped growing.
pub const LANCZOS_DEFAULT_EPS: f64 = 1e-12;

/// Relative residual below which the Krylov-prior solvers declare the grade
/// reached.
pub const GRADE_RESIDUAL_RELTOL: f64 = 1e-12;

/// Condition-number ceiling on information (Gram) matrices of search
/// directions; beyond it the posterior formulas are numerically meaningless.
pub const INFORMATION_CONDITION_LIMIT: f64 = 1e14;

// ---------------------------------------------------------------------------
// Configuration types
// ---------------------------------------------------------------------------

/// Stopping rule for [`cg`]: at most `max_iters` iterations, stop once
/// `‖r_m‖₂ ≤ res_tol·‖b‖₂`.
#[derive(Clone, Copy, Debug)]
pub struct StopCriteria<T: Scalar> {
    pub max_iters: usize,
    pub res_tol: T,
}

impl<T: Scalar> StopCriteria<T> {
    pub fn new(max_iters: usize, res_tol: T) -> Self {
        StopCriteria { max_iters, res_tol }
    }
}

/// Prior covariance choice for the Bayesian solvers.
///
/// `InverseOfA` never materializes `A⁻¹` as a matrix product: applications
/// `Σ₀·w` are inner solves against the operator's cached factorization.
#[derive(Clone, Debug)]
pub enum PriorCov<T: Scalar> {
    /// `Σ₀ = I`.
    Identity,
    /// `Σ₀ = A⁻¹`, applied through factorization solves.
    InverseOfA,
    /// Explicit dense symmetric positive semi-definite `Σ₀`.
    DenseCov(DMatrix<T>),
    /// Factored `Σ₀ = F₀·F₀ᵀ`.
    FactoredCov(SymFactor<T>),
}

/// Gaussian prior `N(x₀, Σ₀)` over the solution.
///
/// The exactness of the posterior formulas additionally requires
/// `x*−x₀ ∈ range(Σ₀)`; that property involves the unknown solution and is
/// the caller's responsibility — it is documented, not checked.
#[derive(Clone, Debug)]
pub struct PriorSpec<T: Scalar> {
    pub mean: DVector<T>,
    pub cov: PriorCov<T>,
}

impl<T: Scalar> PriorSpec<T> {
    pub fn identity(mean: DVector<T>) -> Self {
        PriorSpec {
            mean,
            cov: PriorCov::Identity,
        }
    }

    pub fn inverse_of_a(mean: DVector<T>) -> Self {
        PriorSpec {
            mean,
            cov: PriorCov::InverseOfA,
        }
    }

    pub fn dense(mean: DVector<T>, cov: DMatrix<T>) -> Self {
        PriorSpec {
            mean,
            cov: PriorCov::DenseCov(cov),
        }
    }

    pub fn factored(mean: DVector<T>, factor: SymFactor<T>) -> Self {
        PriorSpec {
            mean,
            cov: PriorCov::FactoredCov(factor),
        }
    }

    /// Materializes the prior as a [`Gaussian`] suitable for sampling:
    /// `InverseOfA` becomes a factored covariance `L⁻ᵀ·L⁻¹` from the
    /// operator's Cholesky factor, so no explicit inverse is ever formed.
    pub fn to_gaussian(&self, a: &SpdMatrix<T>) -> Result<Gaussian<T>> {
        match &self.cov {
            PriorCov::Identity => {
                let n = self.mean.len();
                Gaussian::new_dense(self.mean.clone(), DMatrix::identity(n, n))
            }
            PriorCov::InverseOfA => {
                Gaussian::from_factor(self.mean.clone(), inverse_prior_factor(a)?)
            }
            PriorCov::DenseCov(s) => Gaussian::new_dense(self.mean.clone(), s.clone()),
            PriorCov::FactoredCov(f) => Gaussian::from_factor(self.mean.clone(), f.clone()),
        }
    }
}

/// Solver selector used by the calibration drivers and the CLI.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolverVariant {
    /// Bayesian CG with randomized weighted-orthonormal search directions.
    RandomDirections,
    /// Factored Bayesian CG under the `Σ₀ = A⁻¹` prior.
    InversePrior,
    /// Krylov-prior solver retaining every remaining factor column.
    KrylovFull,
    /// Krylov-prior solver with a rank-`rank` truncated posterior.
    KrylovApprox { rank: usize },
}

// ---------------------------------------------------------------------------
// Solve trace
// ---------------------------------------------------------------------------

/// Per-iteration record of a solve: the mean iterates `x₀..x_m`, residual
/// 2-norms `‖r₀‖..‖r_m‖`, and the step sizes in the solver's own
/// parameterization (CG `γ_i`, Bayesian CG `α_i`, Krylov-mean projection
/// coefficients).
#[derive(Clone, Debug)]
pub struct SolveTrace<T: Scalar> {
    pub iterates: Vec<DVector<T>>,
    pub residual_norms: Vec<T>,
    pub step_sizes: Vec<T>,
    /// Number of search directions actually applied to the mean.
    pub iterations: usize,
}

impl<T: Scalar> SolveTrace<T> {
    fn start(x0: &DVector<T>, r0_norm: T) -> Self {
        SolveTrace {
            iterates: vec![x0.clone()],
            residual_norms: vec![r0_norm],
            step_sizes: Vec::new(),
            iterations: 0,
        }
    }

    fn push(&mut self, x: &DVector<T>, res_norm: T, step: T) {
        self.iterates.push(x.clone());
        self.residual_norms.push(res_norm);
        self.step_sizes.push(step);
        self.iterations += 1;
    }

    /// Final mean iterate.
    pub fn final_iterate(&self) -> &DVector<T> {
        self.iterates.last().expect("trace always holds the start iterate")
    }
}

// ---------------------------------------------------------------------------
// Krylov posterior
// ---------------------------------------------------------------------------

/// Output of the Krylov-prior solvers: the mean iterate plus the trailing
/// covariance factor columns and their positive weights.
#[derive(Clone, Debug)]
pub struct KrylovPosterior<T: Scalar> {
    mean: DVector<T>,
    v: DMatrix<T>,
    phi: DVector<T>,
    grade: usize,
    m_effective: usize,
    a: Arc<SpdMatrix<T>>,
}

impl<T: Scalar> KrylovPosterior<T> {
    /// Posterior mean `x_m`.
    pub fn mean(&self) -> &DVector<T> {
        &self.mean
    }

    /// Retained factor columns (orthonormal in the operator inner product).
    pub fn columns(&self) -> &DMatrix<T> {
        &self.v
    }

    /// Positive weights matching [`KrylovPosterior::columns`].
    pub fn weights(&self) -> &DVector<T> {
        &self.phi
    }

    /// Grade when the solver reached it; otherwise the total number of
    /// iterations explored, which is a lower bound on the grade.
    pub fn grade(&self) -> usize {
        self.grade
    }

    /// Iterations actually applied to the mean.
    pub fn m_effective(&self) -> usize {
        self.m_effective
    }

    /// Number of retained covariance columns.
    pub fn rank_bound(&self) -> usize {
        self.v.ncols()
    }

    /// The operator the factor columns are orthonormal against.
    pub fn operator(&self) -> &Arc<SpdMatrix<T>> {
        &self.a
    }

    /// `trace(A·Σ) = Σ_i φ_i`, exact by the weighted orthonormality of the
    /// factor columns.
    pub fn trace_a_cov(&self) -> T {
        self.phi.iter().fold(T::zero(), |acc, &p| acc + p)
    }

    /// Converts to a [`Gaussian`]: a point mass when no columns remain,
    /// otherwise a Krylov-factor covariance.
    pub fn to_gaussian(&self) -> Result<Gaussian<T>> {
        if self.v.ncols() == 0 {
            Ok(Gaussian::dirac(self.mean.clone()))
        } else {
            Gaussian::from_krylov(
                self.mean.clone(),
                KrylovCov::new(self.v.clone(), self.phi.clone(), Arc::clone(&self.a))?,
            )
        }
    }
}

// ---------------------------------------------------------------------------
// Prior application
// ---------------------------------------------------------------------------

enum PriorApplier<'a, T: Scalar> {
    Identity,
    InverseOfA(&'a SpdMatrix<T>),
    Dense(&'a DMatrix<T>),
    Factored(&'a SymFactor<T>),
}

impl<'a, T: Scalar> PriorApplier<'a, T> {
    fn new(spec: &'a PriorSpec<T>, a: &'a SpdMatrix<T>) -> Self {
        match &spec.cov {
            PriorCov::Identity => PriorApplier::Identity,
            PriorCov::InverseOfA => PriorApplier::InverseOfA(a),
            PriorCov::DenseCov(s) => PriorApplier::Dense(s),
            PriorCov::FactoredCov(f) => PriorApplier::Factored(f),
        }
    }

    /// `Σ₀·w`.
    fn apply(&self, w: &DVector<T>) -> Result<DVector<T>> {
        match self {
            PriorApplier::Identity => Ok(w.clone()),
            PriorApplier::InverseOfA(a) => a.solve(w),
            PriorApplier::Dense(s) => Ok(*s * w),
            PriorApplier::Factored(f) => {
                let inner = f.factor().transpose() * w;
                Ok(f.factor() * inner)
            }
        }
    }

    /// Dense materialization of `Σ₀` (for posterior covariance assembly).
    fn materialize(&self, n: usize) -> Result<DMatrix<T>> {
        match self {
            PriorApplier::Identity => Ok(DMatrix::identity(n, n)),
            PriorApplier::InverseOfA(a) => {
                let inv = a.factorization()?.solve(&DMatrix::identity(n, n));
                Ok(linalg::symmetrized(&inv))
            }
            PriorApplier::Dense(s) => Ok((*s).clone()),
            PriorApplier::Factored(f) => Ok(f.reconstruct()),
        }
    }
}

/// Factor `F₀ = L⁻ᵀ` of the inverse prior `Σ₀ = A⁻¹ = F₀·F₀ᵀ`, obtained from
/// the operator's Cholesky factor by triangular solves against the identity.
pub fn inverse_prior_factor<T: Scalar>(a: &SpdMatrix<T>) -> Result<SymFactor<T>> {
    let n = a.order();
    let l = a.factorization()?.l();
    let l_inv = l
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or_else(|| Error::NotPsd("singular Cholesky factor".into()))?;
    Ok(SymFactor::new(l_inv.transpose()))
}

fn check_system_dims<T: Scalar>(
    a: &SpdMatrix<T>,
    b: &DVector<T>,
    x0: &DVector<T>,
) -> Result<()> {
    let n = a.order();
    if b.len() != n || x0.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "system of order {n} got rhs length {} and start length {}",
            b.len(),
            x0.len()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Conjugate gradients
// ---------------------------------------------------------------------------

/// Plain conjugate gradient iteration.
///
/// Stops when `‖r_m‖₂ ≤ res_tol·‖b‖₂`, when `max_iters` directions have been
/// applied, or when the residual reaches exact zero. A direction with
/// `vᵀAv ≤ 0` means the operator is not positive definite and raises a
/// breakdown error.
pub fn cg<T: Scalar>(
    a: &SpdMatrix<T>,
    b: &DVector<T>,
    x0: &DVector<T>,
    stop: StopCriteria<T>,
) -> Result<SolveTrace<T>> {
    check_system_dims(a, b, x0)?;
    let mut x = x0.clone();
    let mut r = b - a.mul_vec(&x);
    let threshold = stop.res_tol * b.norm();
    let mut trace = SolveTrace::start(&x, r.norm());
    let mut r_sq = r.norm_squared();
    if r_sq.sqrt() <= threshold {
        return Ok(trace);
    }
    let mut v = r.clone();
    for _ in 0..stop.max_iters {
        let av = a.mul_vec(&v);
        let eta = v.dot(&av);
        if eta <= T::zero() {
            return Err(Error::Breakdown(format!(
                "direction curvature vᵀAv = {eta:e} is not positive"
            )));
        }
        let gamma = r_sq / eta;
        x += &v * gamma;
        r -= &av * gamma;
        let new_sq = r.norm_squared();
        if !new_sq.is_finite() {
            return Err(Error::Breakdown("residual norm became non-finite".into()));
        }
        trace.push(&x, new_sq.sqrt(), gamma);
        if new_sq.sqrt() <= threshold || new_sq == T::zero() {
            break;
        }
        let delta = new_sq / r_sq;
        r_sq = new_sq;
        v = &r + &v * delta;
    }
    Ok(trace)
}

// ---------------------------------------------------------------------------
// Bayesian CG (iterative, dense posterior)
// ---------------------------------------------------------------------------

/// Bayesian conjugate gradient under a general prior: `m` iterations of the
/// rank-1 downdate recursion, returning the posterior `N(x_m, Σ_m)` with a
/// dense covariance plus the solve trace.
///
/// The posterior covariance is materialized densely, so the order is limited
/// to the dense-decomposition ceiling. A degenerate system (`r₀ = 0`) returns
/// the prior unchanged with zero effective iterations.
pub fn bayescg<T: Scalar>(
    a: &SpdMatrix<T>,
    b: &DVector<T>,
    prior: &PriorSpec<T>,
    m: usize,
) -> Result<(Gaussian<T>, SolveTrace<T>)> {
    check_system_dims(a, b, &prior.mean)?;
    let n = a.order();
    if n > DENSE_DECOMPOSITION_LIMIT {
        return Err(Error::TooLargeForDense {
            order: n,
            limit: DENSE_DECOMPOSITION_LIMIT,
        });
    }
    let applier = PriorApplier::new(prior, a);
    let mut x = prior.mean.clone();
    let mut r = b - a.mul_vec(&x);
    let r0_sq = r.norm_squared();
    let mut trace = SolveTrace::start(&x, r0_sq.sqrt());
    let mut downdates: Vec<DVector<T>> = Vec::with_capacity(m);

    if r0_sq > T::zero() {
        let breakdown_tol = conv::<T>(BAYESCG_BREAKDOWN_RELTOL) * r0_sq;
        let converged_sq = conv::<T>(CONVERGED_RESIDUAL_RELTOL)
            * conv::<T>(CONVERGED_RESIDUAL_RELTOL)
            * r0_sq;
        let mut s = r.clone();
        let mut r_sq = r0_sq;
        for _ in 0..m {
            let a_s = a.mul_vec(&s);
            let w = applier.apply(&a_s)?;
            let eta = a_s.dot(&w);
            if eta <= breakdown_tol {
                return Err(Error::Breakdown(format!(
                    "search-direction information sᵀAΣ₀As = {eta:e} fell below the breakdown tolerance"
                )));
            }
            let alpha = r_sq / eta;
            x += &w * alpha;
            downdates.push(&w / eta.sqrt());
            let aw = a.mul_vec(&w);
            r -= &aw * alpha;
            let new_sq = r.norm_squared();
            if !new_sq.is_finite() {
                return Err(Error::Breakdown("residual norm became non-finite".into()));
            }
            trace.push(&x, new_sq.sqrt(), alpha);
            if new_sq <= converged_sq {
                break;
            }
            let beta = new_sq / r_sq;
            r_sq = new_sq;
            s = &r + &s * beta;
        }
    }

    let mut sigma = applier.materialize(n)?;
    for u in &downdates {
        // Σ ← Σ − u·uᵀ  (u already scaled by 1/√η)
        for i in 0..n {
            for j in 0..n {
                sigma[(i, j)] -= u[i] * u[j];
            }
        }
    }
    linalg::symmetrize(&mut sigma);
    Ok((Gaussian::new_dense(x, sigma)?, trace))
}

// ---------------------------------------------------------------------------
// Bayesian CG (direct posterior formulas)
// ---------------------------------------------------------------------------

/// Bayesian CG posterior computed directly from an explicit search-direction
/// matrix `S` (n×m): `x_m = x₀ + Σ₀AS·Λ⁻¹·Sᵀr₀` and
/// `Σ_m = Σ₀ − Σ₀AS·Λ⁻¹·(Σ₀AS)ᵀ` with the information matrix `Λ = SᵀAΣ₀AS`.
///
/// `Λ` with condition number beyond [`INFORMATION_CONDITION_LIMIT`] raises a
/// singular-information error. An empty `S` returns the prior.
pub fn bayescg_posterior_direct<T: Scalar>(
    a: &SpdMatrix<T>,
    b: &DVector<T>,
    prior: &PriorSpec<T>,
    s: &DMatrix<T>,
) -> Result<Gaussian<T>> {
    check_system_dims(a, b, &prior.mean)?;
    let n = a.order();
    if s.nrows() != n && s.ncols() > 0 {
        return Err(Error::DimensionMismatch(format!(
            "search directions must have {n} rows, got {}",
            s.nrows()
        )));
    }
    let applier = PriorApplier::new(prior, a);
    let m = s.ncols();
    if m == 0 {
        return Gaussian::new_dense(prior.mean.clone(), applier.materialize(n)?);
    }

    // AS and W = Σ₀·AS, column by column.
    let mut a_s = DMatrix::zeros(n, m);
    let mut w = DMatrix::zeros(n, m);
    for j in 0..m {
        let col = s.column(j).into_owned();
        let a_col = a.mul_vec(&col);
        w.set_column(j, &applier.apply(&a_col)?);
        a_s.set_column(j, &a_col);
    }
    let lambda = linalg::symmetrized(&(a_s.transpose() * &w));
    let (eig_max, eig_min) = linalg::sym_extreme_abs_eigs(&lambda)?;
    if eig_min <= T::zero() || eig_max / eig_min > conv::<T>(INFORMATION_CONDITION_LIMIT) {
        return Err(Error::SingularInformation(format!(
            "information matrix condition estimate {:e} exceeds the supported limit",
            if eig_min > T::zero() { eig_max / eig_min } else { T::max_value().unwrap() }
        )));
    }
    let lambda_chol = nalgebra::Cholesky::new(lambda).ok_or_else(|| {
        Error::SingularInformation("information matrix is not positive definite".into())
    })?;

    let r0 = b - a.mul_vec(&prior.mean);
    let proj = s.transpose() * &r0;
    let y = lambda_chol.solve(&proj);
    let mean = &prior.mean + &w * y;

    let mut sigma = applier.materialize(n)?;
    let correction = &w * lambda_chol.solve(&w.transpose());
    sigma -= correction;
    linalg::symmetrize(&mut sigma);
    Gaussian::new_dense(mean, sigma)
}

// ---------------------------------------------------------------------------
// Modified Lanczos with double classical Gram-Schmidt
// ---------------------------------------------------------------------------

/// Generic Lanczos loop in the inner product of `weight`, which must act as a
/// symmetric positive definite operator. Returns the orthonormal basis built
/// before the candidate norm fell below `eps` or `cap` columns were reached.
fn lanczos_with<T: Scalar>(
    weight: impl Fn(&DVector<T>) -> Result<DVector<T>>,
    v1: &DVector<T>,
    cap: usize,
    eps: T,
) -> Result<DMatrix<T>> {
    let n = v1.len();
    let seed = weight(v1)?;
    let beta_sq = v1.dot(&seed);
    if beta_sq <= T::zero() {
        return Err(Error::Breakdown(format!(
            "starting vector has nonpositive weighted norm {beta_sq:e}"
        )));
    }
    if cap == 0 {
        return Ok(DMatrix::zeros(n, 0));
    }
    let mut cols: Vec<DVector<T>> = vec![v1 / beta_sq.sqrt()];
    let mut last_beta = beta_sq.sqrt();
    while cols.len() < cap {
        let i = cols.len();
        let v_i = &cols[i - 1];
        let seed = weight(v_i)?;
        let mut w = seed.clone();
        if i >= 2 {
            w -= &cols[i - 2] * last_beta;
        }
        let alpha = w.dot(&seed);
        w -= v_i * alpha;
        // Classical Gram-Schmidt against the whole basis, applied twice.
        for _ in 0..2 {
            let u = weight(&w)?;
            let mut correction = DVector::zeros(n);
            for col in &cols {
                correction += col * col.dot(&u);
            }
            w -= correction;
        }
        let u = weight(&w)?;
        let beta_sq = w.dot(&u).max(T::zero());
        let beta = beta_sq.sqrt();
        if beta < eps {
            break;
        }
        cols.push(&w / beta);
        last_beta = beta;
    }
    Ok(DMatrix::from_columns(&cols))
}

/// Lanczos iteration in the `A`-inner product with classical Gram-Schmidt
/// reorthogonalization applied twice per step.
///
/// Returns columns `v₁..v_k` (k ≤ `max_dim`) that are `A`-orthonormal to
/// high accuracy and span the nested Krylov spaces of `(A, v1)`. The loop
/// stops early once the `A`-norm of the next candidate falls below `eps`,
/// which signals that the Krylov space stopped growing.
pub fn modified_lanczos<T: Scalar>(
    a: &SpdMatrix<T>,
    v1: &DVector<T>,
    max_dim: usize,
    eps: T,
) -> Result<DMatrix<T>> {
    if v1.len() != a.order() {
        return Err(Error::DimensionMismatch(format!(
            "starting vector length {} does not match operator order {}",
            v1.len(),
            a.order()
        )));
    }
    lanczos_with(|v| Ok(a.mul_vec(v)), v1, max_dim.min(a.order()), eps)
}

// ---------------------------------------------------------------------------
// Bayesian CG with random search directions
// ---------------------------------------------------------------------------

/// Bayesian CG whose search directions are a weighted-orthonormal Lanczos
/// basis grown from a standard-normal start, with weight operator `AΣ₀A`.
///
/// Because the directions never see `b`, the posterior covariance is a
/// deterministic function of `(A, Σ₀, seed stream)` alone. The posterior is
/// returned densely together with the trace of incremental means.
pub fn bayescg_random_directions<T: Scalar>(
    a: &SpdMatrix<T>,
    b: &DVector<T>,
    prior: &PriorSpec<T>,
    m: usize,
    src: &mut RandomSource,
) -> Result<(Gaussian<T>, SolveTrace<T>)> {
    check_system_dims(a, b, &prior.mean)?;
    let n = a.order();
    if n > DENSE_DECOMPOSITION_LIMIT {
        return Err(Error::TooLargeForDense {
            order: n,
            limit: DENSE_DECOMPOSITION_LIMIT,
        });
    }
    let applier = PriorApplier::new(prior, a);
    let mut x = prior.mean.clone();
    let r0 = b - a.mul_vec(&x);
    let mut trace = SolveTrace::start(&x, r0.norm());
    if b.norm() == T::zero() && prior.mean.norm() == T::zero() {
        return Ok((
            Gaussian::new_dense(x, applier.materialize(n)?)?,
            trace,
        ));
    }

    let s1 = src.normal_vector::<T>(n);
    let weight = |v: &DVector<T>| -> Result<DVector<T>> {
        let av = a.mul_vec(v);
        let sav = applier.apply(&av)?;
        Ok(a.mul_vec(&sav))
    };
    let s = lanczos_with(weight, &s1, m.min(n), conv::<T>(LANCZOS_DEFAULT_EPS))?;
    let k = s.ncols();

    // Diagonal information: the basis is AΣ₀A-orthonormal, so Λ is the
    // identity up to rounding; we still divide by the computed η_j.
    let mut etas = Vec::with_capacity(k);
    let mut w_cols: Vec<DVector<T>> = Vec::with_capacity(k);
    for j in 0..k {
        let col = s.column(j).into_owned();
        let a_col = a.mul_vec(&col);
        let w = applier.apply(&a_col)?;
        etas.push(a_col.dot(&w));
        w_cols.push(w);
    }
    let eta_max = etas.iter().copied().fold(T::zero(), T::max);
    let eta_min = etas.iter().copied().fold(T::max_value().unwrap(), T::min);
    if eta_min <= T::zero() || eta_max / eta_min > conv::<T>(INFORMATION_CONDITION_LIMIT) {
        return Err(Error::SingularInformation(
            "random search directions lost their weighted orthonormality".into(),
        ));
    }

    for j in 0..k {
        let s_col = s.column(j).into_owned();
        let alpha = s_col.dot(&r0) / etas[j];
        x += &w_cols[j] * alpha;
        let res_norm = (b - a.mul_vec(&x)).norm();
        trace.push(&x, res_norm, alpha);
    }

    let mut sigma = applier.materialize(n)?;
    for j in 0..k {
        let u = &w_cols[j] / etas[j].sqrt();
        for i in 0..n {
            for l in 0..n {
                sigma[(i, l)] -= u[i] * u[l];
            }
        }
    }
    linalg::symmetrize(&mut sigma);
    Ok((Gaussian::new_dense(x, sigma)?, trace))
}

// ---------------------------------------------------------------------------
// Bayesian CG with factored covariances
// ---------------------------------------------------------------------------

/// Result of [`bayescg_factored`]: the posterior mean, the posterior
/// covariance factor `F_m` with `Σ_m = F_m·F_mᵀ`, the orthonormal projector
/// basis `P` accumulated by the recursion (`F_m = F₀(I − PPᵀ)`), and the
/// solve trace.
#[derive(Clone, Debug)]
pub struct FactoredSolve<T: Scalar> {
    pub mean: DVector<T>,
    pub factor: SymFactor<T>,
    pub projector_basis: DMatrix<T>,
    pub trace: SolveTrace<T>,
}

/// Bayesian CG that maintains the posterior covariance in factored form:
/// given `Σ₀ = F₀·F₀ᵀ`, each iteration appends the normalized column
/// `p_i = F₀ᵀAs_i/√η_i` and the posterior factor is `F_m = F₀(I − P·Pᵀ)`.
///
/// The mean recursion is identical to [`bayescg`]; only the covariance
/// bookkeeping differs, which keeps memory at n×ℓ instead of n².
pub fn bayescg_factored<T: Scalar>(
    a: &SpdMatrix<T>,
    b: &DVector<T>,
    x0: &DVector<T>,
    f0: &SymFactor<T>,
    m: usize,
) -> Result<FactoredSolve<T>> {
    check_system_dims(a, b, x0)?;
    if f0.order() != a.order() {
        return Err(Error::DimensionMismatch(format!(
            "prior factor has {} rows, operator order is {}",
            f0.order(),
            a.order()
        )));
    }
    let width = f0.width();
    let mut x = x0.clone();
    let mut r = b - a.mul_vec(&x);
    let r0_sq = r.norm_squared();
    let mut trace = SolveTrace::start(&x, r0_sq.sqrt());
    let mut p_cols: Vec<DVector<T>> = Vec::new();

    if r0_sq > T::zero() {
        let breakdown_tol = conv::<T>(BAYESCG_BREAKDOWN_RELTOL) * r0_sq;
        let converged_sq = conv::<T>(CONVERGED_RESIDUAL_RELTOL)
            * conv::<T>(CONVERGED_RESIDUAL_RELTOL)
            * r0_sq;
        let mut s = r.clone();
        let mut r_sq = r0_sq;
        for _ in 0..m {
            let a_s = a.mul_vec(&s);
            let p_raw = f0.factor().transpose() * &a_s;
            let q = f0.factor() * &p_raw;
            let eta = s.dot(&a.mul_vec(&q));
            if eta <= breakdown_tol {
                return Err(Error::Breakdown(format!(
                    "factored recursion information η = {eta:e} fell below the breakdown tolerance"
                )));
            }
            p_cols.push(&p_raw / eta.sqrt());
            let alpha = r_sq / eta;
            x += &q * alpha;
            r -= a.mul_vec(&q) * alpha;
            let new_sq = r.norm_squared();
            if !new_sq.is_finite() {
                return Err(Error::Breakdown("residual norm became non-finite".into()));
            }
            trace.push(&x, new_sq.sqrt(), alpha);
            if new_sq <= converged_sq {
                break;
            }
            let beta = new_sq / r_sq;
            r_sq = new_sq;
            s = &r + &s * beta;
        }
    }

    let p = if p_cols.is_empty() {
        DMatrix::zeros(width, 0)
    } else {
        DMatrix::from_columns(&p_cols)
    };
    // F_m = F₀·(I − P·Pᵀ), applied without forming the n×ℓ product twice.
    let mut factor = f0.factor().clone();
    if p.ncols() > 0 {
        let f0_p = f0.factor() * &p;
        factor -= f0_p * p.transpose();
    }
    Ok(FactoredSolve {
        mean: x,
        factor: SymFactor::new(factor),
        projector_basis: p,
        trace,
    })
}

// ---------------------------------------------------------------------------
// Krylov-prior solvers
// ---------------------------------------------------------------------------

fn empty_krylov_posterior<T: Scalar>(
    mean: DVector<T>,
    a: &Arc<SpdMatrix<T>>,
) -> KrylovPosterior<T> {
    let n = a.order();
    KrylovPosterior {
        mean,
        v: DMatrix::zeros(n, 0),
        phi: DVector::zeros(0),
        grade: 0,
        m_effective: 0,
        a: Arc::clone(a),
    }
}

/// Krylov-prior solver with the full posterior: builds the entire
/// `A`-orthonormal Lanczos basis of `(A, r₀)` up to the numerical grade `g`,
/// projects the mean onto the first `m` columns, and keeps columns
/// `m+1..g` with weights `φ_i = (v_iᵀr₀)²` as the posterior covariance.
pub fn krylov_full<T: Scalar>(
    a: &Arc<SpdMatrix<T>>,
    b: &DVector<T>,
    x0: &DVector<T>,
    m: usize,
    eps: T,
) -> Result<(KrylovPosterior<T>, SolveTrace<T>)> {
    check_system_dims(a, b, x0)?;
    let r0 = b - a.mul_vec(x0);
    if r0.norm() == T::zero() {
        let trace = SolveTrace::start(x0, T::zero());
        return Ok((empty_krylov_posterior(x0.clone(), a), trace));
    }
    let v = modified_lanczos(a.as_ref(), &r0, a.order(), eps)?;
    let g = v.ncols();
    let coeffs = v.transpose() * &r0;
    let m_eff = m.min(g);

    let mut x = x0.clone();
    let mut trace = SolveTrace::start(&x, r0.norm());
    for i in 0..m_eff {
        let col = v.column(i).into_owned();
        x += &col * coeffs[i];
        let res_norm = (b - a.mul_vec(&x)).norm();
        trace.push(&x, res_norm, coeffs[i]);
    }

    // Trailing columns carry weights φ_i = (v_iᵀr₀)²; a weight that rounds
    // to exact zero would make the covariance factor invalid, so the tail is
    // cut there (in exact arithmetic every φ_i up to the grade is positive).
    let mut tail_cols: Vec<DVector<T>> = Vec::with_capacity(g - m_eff);
    let mut tail_phi: Vec<T> = Vec::with_capacity(g - m_eff);
    for i in m_eff..g {
        let phi = coeffs[i] * coeffs[i];
        if phi <= T::zero() {
            break;
        }
        tail_cols.push(v.column(i).into_owned());
        tail_phi.push(phi);
    }
    let v_tail = if tail_cols.is_empty() {
        DMatrix::zeros(a.order(), 0)
    } else {
        DMatrix::from_columns(&tail_cols)
    };
    Ok((
        KrylovPosterior {
            mean: x,
            v: v_tail,
            phi: DVector::from_vec(tail_phi),
            grade: g,
            m_effective: m_eff,
            a: Arc::clone(a),
        },
        trace,
    ))
}

/// Krylov-prior solver with a rank-limited posterior: `m` conjugate-gradient
/// iterations produce the mean, and up to `d` further iterations of the same
/// three-term recursion harvest normalized direction columns
/// `v_j/√η_j` with weights `φ_j = γ_j‖r_{j−1}‖₂²`. Total cost is `m+d` CG
/// iterations; no basis for the first `m` directions is stored.
///
/// The retained rank is clipped to `min(d, g−m)` when the recursion reaches
/// the grade early.
pub fn krylov_approx<T: Scalar>(
    a: &Arc<SpdMatrix<T>>,
    b: &DVector<T>,
    x0: &DVector<T>,
    m: usize,
    d: usize,
) -> Result<(KrylovPosterior<T>, SolveTrace<T>)> {
    check_system_dims(a, b, x0)?;
    if d == 0 {
        return Err(Error::Config(
            "approximate Krylov posterior needs at least one covariance column (d ≥ 1)".into(),
        ));
    }
    let mut x = x0.clone();
    let mut r = b - a.mul_vec(&x);
    let r0_norm = r.norm();
    let mut trace = SolveTrace::start(&x, r0_norm);
    if r0_norm == T::zero() {
        return Ok((empty_krylov_posterior(x, a), trace));
    }

    let grade_threshold = conv::<T>(GRADE_RESIDUAL_RELTOL) * r0_norm;
    let mut v = r.clone();
    let mut r_sq = r0_norm * r0_norm;
    let mut v_cols: Vec<DVector<T>> = Vec::new();
    let mut phis: Vec<T> = Vec::new();
    let total = m + d;
    let mut iterations_run = 0usize;
    let mut mean_iters = 0usize;

    for i in 1..=total {
        if r_sq.sqrt() <= grade_threshold {
            break;
        }
        let av = a.mul_vec(&v);
        let eta = v.dot(&av);
        if eta <= T::zero() {
            return Err(Error::Breakdown(format!(
                "direction curvature vᵀAv = {eta:e} is not positive"
            )));
        }
        let gamma = r_sq / eta;
        if i <= m {
            x += &v * gamma;
            mean_iters = i;
        } else {
            v_cols.push(&v / eta.sqrt());
            phis.push(gamma * r_sq);
        }
        r -= &av * gamma;
        let new_sq = r.norm_squared();
        if !new_sq.is_finite() {
            return Err(Error::Breakdown("residual norm became non-finite".into()));
        }
        if i <= m {
            trace.push(&x, new_sq.sqrt(), gamma);
        }
        iterations_run = i;
        let delta = new_sq / r_sq;
        r_sq = new_sq;
        v = &r + &v * delta;
    }

    // When the residual collapsed early this is the detected grade;
    // otherwise it is the explored depth, a lower bound on the grade.
    let grade = iterations_run;
    let n = a.order();
    let v_mat = if v_cols.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&v_cols)
    };
    Ok((
        KrylovPosterior {
            mean: x,
            v: v_mat,
            phi: DVector::from_vec(phis),
            grade,
            m_effective: mean_iters,
            a: Arc::clone(a),
        },
        trace,
    ))
}
