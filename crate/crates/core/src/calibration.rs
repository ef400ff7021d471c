//! Calibration statistics for probabilistic solver posteriors.
//!
//! The posterior `N(x_m, Σ_m)` of a probabilistic linear solver claims a
//! distribution for the unknown solution. This module quantifies how honest
//! that claim is on synthetic test problems with known solutions:
//!
//! * the **Z-statistic** `z = (x*−x_m)ᵀΣ_m†(x*−x_m)`, which for a calibrated
//!   posterior follows a chi-squared law with `rank(Σ_m)` degrees of freedom
//!   ([`z_statistic`], [`sample_z`]);
//! * the **S-statistic** `s = ‖x*−x_m‖_A²`, whose expectation for a
//!   calibrated posterior equals `trace(A·Σ_m)` ([`s_statistic`],
//!   [`sample_s`]);
//! * goodness-of-fit plumbing: the chi-squared CDF ([`chi_square_cdf`]), the
//!   Kolmogorov–Smirnov sup-distance ([`ks_statistic`]), and threshold-based
//!   classification into calibrated / pessimistic / optimistic verdicts
//!   ([`verdict_from_z`], [`verdict_from_s`]).
//!
//! Sampling drivers draw each test problem from its own deterministic random
//! stream, so results are identical for any rayon worker count.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::gaussian::{Covariance, Gaussian, KrylovCov, RandomSource};
use crate::linalg::{self, SpdMatrix, SymFactor};
use crate::solvers::{
    self, PriorCov, PriorSpec, SolverVariant, LANCZOS_DEFAULT_EPS,
};
use crate::{conv, Error, Result, Scalar};

/// Default Kolmogorov–Smirnov value below which a Z-sample set counts as
/// calibrated.
pub const KS_CALIBRATED_DEFAULT: f64 = 0.25;

/// Default relative gap between the S-sample mean and the posterior trace
/// mean below which an S-sample set counts as calibrated.
pub const TRACE_REL_CALIBRATED_DEFAULT: f64 = 0.1;

/// Floor used when normalizing by an S-sample mean that may be zero.
pub const EVIDENCE_FLOOR: f64 = 1e-30;

/// Statistic values may round slightly negative; anything above this floor
/// is clamped to zero, anything below it is rejected as a genuine sign error.
pub const SAMPLE_ROUNDING_FLOOR: f64 = -1e-10;

/// Condition-number limit for the small Gram matrix `VᵀV` in the factored
/// covariance pseudoinverse.
pub const GRAM_CONDITION_LIMIT: f64 = 1e14;

/// Absolute tolerance for the idempotence and symmetry checks on a claimed
/// orthogonal projector.
pub const PROJECTOR_TOL: f64 = 1e-10;

// ---------------------------------------------------------------------------
// Thresholds and verdicts
// ---------------------------------------------------------------------------

/// Classification thresholds for [`verdict_from_z`] and [`verdict_from_s`].
#[derive(Clone, Copy, Debug)]
pub struct CalibrationThresholds<T: Scalar> {
    /// KS value at or below which Z-samples count as calibrated.
    pub ks_cal: T,
    /// Relative mean gap at or below which S-samples count as calibrated.
    pub rel_cal: T,
}

impl<T: Scalar> Default for CalibrationThresholds<T> {
    fn default() -> Self {
        CalibrationThresholds {
            ks_cal: conv(KS_CALIBRATED_DEFAULT),
            rel_cal: conv(TRACE_REL_CALIBRATED_DEFAULT),
        }
    }
}

/// Qualitative posture of a posterior's uncertainty claim.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CalibrationClass {
    /// The empirical statistic matches the claimed distribution.
    Calibrated,
    /// The posterior overstates uncertainty (errors smaller than claimed).
    Pessimistic,
    /// The posterior understates uncertainty (errors larger than claimed).
    Optimistic,
}

impl fmt::Display for CalibrationClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let word = match self {
            CalibrationClass::Calibrated => "calibrated",
            CalibrationClass::Pessimistic => "pessimistic",
            CalibrationClass::Optimistic => "optimistic",
        };
        f.write_str(word)
    }
}

/// A classification together with the number that produced it: the KS value
/// for Z-verdicts, the signed relative mean gap for S-verdicts.
#[derive(Clone, Copy, Debug)]
pub struct Verdict<T: Scalar> {
    pub class: CalibrationClass,
    pub evidence: T,
}

// ---------------------------------------------------------------------------
// Sample sets
// ---------------------------------------------------------------------------

/// Z-statistic samples from a batch of test problems, with the degrees of
/// freedom of the matching chi-squared reference and the KS distance to it.
#[derive(Clone, Debug)]
pub struct ZSampleSet<T: Scalar> {
    samples: Vec<T>,
    dof: usize,
    ks: T,
    mean: T,
    skipped: usize,
}

impl<T: Scalar> ZSampleSet<T> {
    /// Aggregates per-problem Z-values and posterior covariance ranks.
    ///
    /// Samples within rounding distance of zero are clamped to zero; the
    /// degrees of freedom are the lower median of the ranks (clamped to at
    /// least 1 so the reference distribution is proper), keeping the count
    /// integral when the batch size is even.
    pub fn new(samples: Vec<T>, ranks: &[usize], skipped: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Config(
                "a Z-sample set needs at least one accepted test problem".into(),
            ));
        }
        if ranks.len() != samples.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} Z-samples but {} covariance ranks",
                samples.len(),
                ranks.len()
            )));
        }
        let samples = clamp_nonnegative(samples, "Z-statistic")?;
        let mut sorted_ranks = ranks.to_vec();
        sorted_ranks.sort_unstable();
        let dof = sorted_ranks[(sorted_ranks.len() - 1) / 2].max(1);
        let mean = mean(&samples);
        let mut sorted = samples.clone();
        sorted.sort_by(|x, y| x.partial_cmp(y).expect("Z-samples are finite"));
        let ks = ks_statistic(&sorted, |x| chi_square_cdf(dof, x));
        Ok(ZSampleSet {
            samples,
            dof,
            ks,
            mean,
            skipped,
        })
    }

    /// The clamped Z-values in problem order.
    pub fn samples(&self) -> &[T] {
        &self.samples
    }

    /// Degrees of freedom of the chi-squared reference: the median posterior
    /// covariance rank across test problems.
    pub fn dof(&self) -> usize {
        self.dof
    }

    /// KS sup-distance between the samples and the chi-squared reference.
    pub fn ks(&self) -> T {
        self.ks
    }

    /// Empirical mean of the samples.
    pub fn mean(&self) -> T {
        self.mean
    }

    /// Mean of the chi-squared reference (equal to its degrees of freedom).
    pub fn chi2_mean(&self) -> T {
        conv(self.dof as f64)
    }

    /// Number of test problems dropped because the solver broke down.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    /// Number of accepted test problems.
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    /// Whether the set holds no samples (unreachable via [`Self::new`]).
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// S-statistic samples paired with the posterior trace values they are
/// compared against.
#[derive(Clone, Debug)]
pub struct SSampleSet<T: Scalar> {
    s_samples: Vec<T>,
    traces: Vec<T>,
    h: T,
    trace_mean: T,
    trace_std: T,
    skipped: usize,
}

impl<T: Scalar> SSampleSet<T> {
    /// Aggregates per-problem squared weighted errors `sᵢ` and posterior
    /// traces `tᵢ = trace(A·Σ_m)`. The empirical mean `h` is the plain
    /// left-to-right average of the `sᵢ`, exactly as summed.
    pub fn new(s_samples: Vec<T>, traces: Vec<T>, skipped: usize) -> Result<Self> {
        if s_samples.is_empty() {
            return Err(Error::Config(
                "an S-sample set needs at least one accepted test problem".into(),
            ));
        }
        if traces.len() != s_samples.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} S-samples but {} posterior traces",
                s_samples.len(),
                traces.len()
            )));
        }
        let s_samples = clamp_nonnegative(s_samples, "S-statistic")?;
        let traces = clamp_nonnegative(traces, "posterior trace")?;
        let h = mean(&s_samples);
        let trace_mean = mean(&traces);
        let trace_std = sample_std(&traces, trace_mean);
        Ok(SSampleSet {
            s_samples,
            traces,
            h,
            trace_mean,
            trace_std,
            skipped,
        })
    }

    /// The squared weighted errors in problem order.
    pub fn s_samples(&self) -> &[T] {
        &self.s_samples
    }

    /// The posterior traces in problem order.
    pub fn traces(&self) -> &[T] {
        &self.traces
    }

    /// Empirical mean of the S-samples.
    pub fn h(&self) -> T {
        self.h
    }

    /// Mean of the posterior traces.
    pub fn trace_mean(&self) -> T {
        self.trace_mean
    }

    /// Sample standard deviation (denominator N−1) of the posterior traces;
    /// zero for a single sample.
    pub fn trace_std(&self) -> T {
        self.trace_std
    }

    /// Number of test problems dropped because the solver broke down.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    /// Number of accepted test problems.
    pub fn len(&self) -> usize {
        self.s_samples.len()
    }

    /// Whether the set holds no samples (unreachable via [`Self::new`]).
    pub fn is_empty(&self) -> bool {
        self.s_samples.is_empty()
    }
}

/// Clamps values in `[SAMPLE_ROUNDING_FLOOR, 0)` to zero and rejects
/// anything more negative.
fn clamp_nonnegative<T: Scalar>(values: Vec<T>, what: &str) -> Result<Vec<T>> {
    let floor = conv::<T>(SAMPLE_ROUNDING_FLOOR);
    for v in &values {
        if *v < floor {
            return Err(Error::Config(format!(
                "{what} value {v:e} is below the rounding floor {floor:e}"
            )));
        }
    }
    Ok(values.into_iter().map(|v| v.max(T::zero())).collect())
}

/// Plain left-to-right mean.
fn mean<T: Scalar>(values: &[T]) -> T {
    let sum = values.iter().fold(T::zero(), |acc, &v| acc + v);
    sum / conv::<T>(values.len() as f64)
}

/// Sample standard deviation with denominator N−1; zero when N ≤ 1.
fn sample_std<T: Scalar>(values: &[T], mean: T) -> T {
    if values.len() <= 1 {
        return T::zero();
    }
    let ss = values.iter().fold(T::zero(), |acc, &v| {
        let d = v - mean;
        acc + d * d
    });
    (ss / conv::<T>((values.len() - 1) as f64)).max(T::zero()).sqrt()
}

// ---------------------------------------------------------------------------
// Distribution plumbing
// ---------------------------------------------------------------------------

/// CDF of the chi-squared distribution with `dof` degrees of freedom,
/// evaluated as the regularized lower incomplete gamma `P(dof/2, x/2)`.
///
/// Nonpositive (or NaN) arguments map to 0; `dof = 0` denotes the degenerate
/// distribution with all mass at zero, whose CDF is 1 for positive `x`.
pub fn chi_square_cdf<T: Scalar>(dof: usize, x: T) -> T {
    if !(x > T::zero()) {
        return T::zero();
    }
    if dof == 0 {
        return T::one();
    }
    let xf = x.to_f64().expect("statistic values fit in f64");
    if !xf.is_finite() {
        return T::one();
    }
    conv(statrs::function::gamma::gamma_lr(dof as f64 / 2.0, xf / 2.0))
}

/// Kolmogorov–Smirnov sup-distance between the empirical CDF of
/// ascending-sorted `samples` and the reference `cdf`.
///
/// The empirical CDF is a right-continuous step function; the supremum is
/// attained at a sample point from one side or the other, so both one-sided
/// limits `F(xᵢ) − (i−1)/N` and `i/N − F(xᵢ)` are examined at every point.
pub fn ks_statistic<T: Scalar>(samples: &[T], cdf: impl Fn(T) -> T) -> T {
    let n = samples.len();
    if n == 0 {
        return T::zero();
    }
    debug_assert!(
        samples.windows(2).all(|w| w[0] <= w[1]),
        "KS samples must be sorted ascending"
    );
    let nt = conv::<T>(n as f64);
    let mut sup = T::zero();
    for (i, &x) in samples.iter().enumerate() {
        let f = cdf(x);
        let below = conv::<T>(i as f64) / nt;
        let above = conv::<T>((i + 1) as f64) / nt;
        sup = sup.max(f - below).max(above - f);
    }
    sup
}

// ---------------------------------------------------------------------------
// Per-problem statistics
// ---------------------------------------------------------------------------

/// Z-statistic `(x*−x_m)ᵀ·Σ_m†·(x*−x_m)` of a posterior against a known
/// solution, clamped at zero against pseudoinverse roundoff.
///
/// Dense and factored covariances are evaluated through a minimum-norm
/// least-squares solve followed by an inner product; low-rank factored
/// covariances use the closed-form pseudoinverse of
/// [`krylov_cov_pinv_apply`] instead of a large decomposition.
pub fn z_statistic<T: Scalar>(x_star: &DVector<T>, posterior: &Gaussian<T>) -> Result<T> {
    z_with_rank(x_star, posterior).map(|(z, _)| z)
}

/// [`z_statistic`] plus the numerical rank of the posterior covariance, the
/// degrees of freedom its chi-squared reference would use. Dense paths reuse
/// one SVD for both numbers; weighted-orthonormal factors have full column
/// rank by construction, so their column count is exact.
fn z_with_rank<T: Scalar>(x_star: &DVector<T>, posterior: &Gaussian<T>) -> Result<(T, usize)> {
    if x_star.len() != posterior.dim() {
        return Err(Error::DimensionMismatch(format!(
            "solution has length {}, posterior dimension is {}",
            x_star.len(),
            posterior.dim()
        )));
    }
    let e = x_star - posterior.mean();
    match posterior.covariance() {
        Covariance::Dirac => Ok((T::zero(), 0)),
        Covariance::KrylovFactors(k) => {
            let q = krylov_cov_pinv_apply(k, &e)?;
            Ok((e.dot(&q).max(T::zero()), k.rank_bound()))
        }
        _ => {
            let sigma = posterior.covariance_dense();
            let (q, rank) = linalg::min_norm_solve_with_rank(&sigma, &e)?;
            Ok((e.dot(&q).max(T::zero()), rank))
        }
    }
}

/// Applies the pseudoinverse of the low-rank covariance `V·diag(φ)·Vᵀ` to a
/// vector without materializing any n×n matrix:
/// `V (VᵀV)⁻¹ diag(φ)⁻¹ (VᵀV)⁻¹ Vᵀ·y`.
///
/// The small k×k Gram matrix `VᵀV` is factorized once and reused for both
/// inner solves. A Gram condition number above [`GRAM_CONDITION_LIMIT`]
/// (columns nearly dependent) is rejected.
pub fn krylov_cov_pinv_apply<T: Scalar>(k: &KrylovCov<T>, y: &DVector<T>) -> Result<DVector<T>> {
    let v = k.columns();
    if y.len() != v.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "vector has length {}, covariance dimension is {}",
            y.len(),
            v.nrows()
        )));
    }
    if v.ncols() == 0 {
        return Ok(DVector::zeros(y.len()));
    }
    let gram = linalg::symmetrized(&(v.transpose() * v));
    let (gmax, gmin) = linalg::sym_extreme_abs_eigs(&gram)?;
    if gmin <= T::zero() || gmax / gmin > conv::<T>(GRAM_CONDITION_LIMIT) {
        return Err(Error::IllConditionedFactors(format!(
            "Gram matrix of the covariance factor has condition beyond {:e}",
            GRAM_CONDITION_LIMIT
        )));
    }
    let chol = nalgebra::Cholesky::new(gram).ok_or_else(|| {
        Error::IllConditionedFactors(
            "Gram matrix of the covariance factor is not positive definite".into(),
        )
    })?;
    let mut t = chol.solve(&(v.transpose() * y));
    for (ti, &phi) in t.iter_mut().zip(k.weights().iter()) {
        *ti /= phi;
    }
    let t = chol.solve(&t);
    Ok(v * t)
}

/// S-statistic `‖x*−x_m‖_A²`: the squared error of the posterior mean in the
/// norm induced by the system operator, clamped at zero against roundoff.
pub fn s_statistic<T: Scalar>(
    a: &SpdMatrix<T>,
    x_star: &DVector<T>,
    x_m: &DVector<T>,
) -> Result<T> {
    if x_star.len() != x_m.len() {
        return Err(Error::DimensionMismatch(format!(
            "solution has length {}, posterior mean has length {}",
            x_star.len(),
            x_m.len()
        )));
    }
    let e = x_star - x_m;
    Ok(linalg::a_inner(a, &e, &e)?.max(T::zero()))
}

/// `trace(A·Σ)` of a posterior covariance. Weighted-orthonormal factors with
/// `A` as their reference operator satisfy `trace(A·VΦVᵀ) = Σφᵢ` exactly, so
/// that sum is returned directly; other representations fall back to the
/// generic trace product.
fn posterior_a_trace<T: Scalar>(a: &Arc<SpdMatrix<T>>, posterior: &Gaussian<T>) -> Result<T> {
    match posterior.covariance() {
        Covariance::KrylovFactors(k) if Arc::ptr_eq(k.operator(), a) => {
            Ok(k.weights().iter().fold(T::zero(), |acc, &p| acc + p))
        }
        _ => posterior.cov_trace_with(a),
    }
}

// ---------------------------------------------------------------------------
// Sampling drivers
// ---------------------------------------------------------------------------

/// Tunables for the sampling drivers that are not part of the test-problem
/// definition.
#[derive(Clone, Copy, Debug)]
pub struct SamplingOptions<T: Scalar> {
    /// Breakdown tolerance for the weighted-orthonormal basis construction
    /// used by the full-posterior Krylov solver.
    pub lanczos_eps: T,
}

impl<T: Scalar> Default for SamplingOptions<T> {
    fn default() -> Self {
        SamplingOptions {
            lanczos_eps: conv(LANCZOS_DEFAULT_EPS),
        }
    }
}

struct ProblemRecord<T: Scalar> {
    z: T,
    rank: usize,
    s: T,
    trace: T,
}

/// Whether an error is a per-problem numerical failure that the sampling
/// drivers record and skip, as opposed to a defect that must propagate.
pub(crate) fn is_recoverable(e: &Error) -> bool {
    matches!(
        e,
        Error::Breakdown(_) | Error::SingularInformation(_) | Error::IllConditionedFactors(_)
    )
}

/// Draws Z-statistic samples over `n_test` synthetic problems.
///
/// For each problem `i`: a solution `x*` is drawn from `reference`, the
/// right-hand side is `b = A·x*`, the selected solver runs to iteration `m`,
/// and `zᵢ` is computed from its posterior. The degrees of freedom are the
/// median posterior covariance rank. Problem `i` draws from the stream
/// `rng.stream() + 1 + i` of the master seed; solver-internal randomness
/// uses the master's own stream so every problem sees identical search
/// directions. Solver breakdowns are recorded and skipped; more than 10%
/// skipped is an error.
pub fn sample_z<T: Scalar + Send + Sync>(
    a: &Arc<SpdMatrix<T>>,
    prior: &PriorSpec<T>,
    reference: &Gaussian<T>,
    solver: SolverVariant,
    m: usize,
    n_test: usize,
    rng: &RandomSource,
) -> Result<ZSampleSet<T>> {
    let raw = run_problems(
        a,
        prior,
        reference,
        solver,
        m,
        n_test,
        rng,
        &SamplingOptions::default(),
        true,
        false,
    )?;
    ZSampleSet::new(raw.z_values, &raw.ranks, raw.skipped)
}

/// Draws S-statistic samples over `n_test` synthetic problems, pairing each
/// squared weighted error `sᵢ` with its posterior trace `tᵢ = trace(A·Σ_m)`.
///
/// Problem layout, randomness, and the skip policy match [`sample_z`], so
/// both drivers see the same test problems for a given master source.
pub fn sample_s<T: Scalar + Send + Sync>(
    a: &Arc<SpdMatrix<T>>,
    prior: &PriorSpec<T>,
    reference: &Gaussian<T>,
    solver: SolverVariant,
    m: usize,
    n_test: usize,
    rng: &RandomSource,
) -> Result<SSampleSet<T>> {
    let raw = run_problems(
        a,
        prior,
        reference,
        solver,
        m,
        n_test,
        rng,
        &SamplingOptions::default(),
        false,
        true,
    )?;
    SSampleSet::new(raw.s_values, raw.traces, raw.skipped)
}

/// Draws Z- and S-statistics from one shared batch of test problems, so each
/// problem is solved once instead of twice.
pub fn sample_z_and_s<T: Scalar + Send + Sync>(
    a: &Arc<SpdMatrix<T>>,
    prior: &PriorSpec<T>,
    reference: &Gaussian<T>,
    solver: SolverVariant,
    m: usize,
    n_test: usize,
    rng: &RandomSource,
    options: &SamplingOptions<T>,
) -> Result<(ZSampleSet<T>, SSampleSet<T>)> {
    let raw = run_problems(
        a, prior, reference, solver, m, n_test, rng, options, true, true,
    )?;
    let zset = ZSampleSet::new(raw.z_values, &raw.ranks, raw.skipped)?;
    let sset = SSampleSet::new(raw.s_values, raw.traces, raw.skipped)?;
    Ok((zset, sset))
}

struct RawSamples<T: Scalar> {
    z_values: Vec<T>,
    ranks: Vec<usize>,
    s_values: Vec<T>,
    traces: Vec<T>,
    skipped: usize,
}

/// Shared sampling core: runs the test problems in parallel and aggregates
/// by problem index, producing identical output for any worker count.
#[allow(clippy::too_many_arguments)]
fn run_problems<T: Scalar + Send + Sync>(
    a: &Arc<SpdMatrix<T>>,
    prior: &PriorSpec<T>,
    reference: &Gaussian<T>,
    solver: SolverVariant,
    m: usize,
    n_test: usize,
    rng: &RandomSource,
    options: &SamplingOptions<T>,
    need_z: bool,
    need_s: bool,
) -> Result<RawSamples<T>> {
    if n_test == 0 {
        return Err(Error::Config(
            "sampling needs at least one test problem".into(),
        ));
    }
    if reference.dim() != a.order() {
        return Err(Error::DimensionMismatch(format!(
            "reference distribution has dimension {}, operator order is {}",
            reference.dim(),
            a.order()
        )));
    }
    // The factored solver needs a prior covariance square root; build it once.
    let prior_factor = match solver {
        SolverVariant::InversePrior => Some(factor_for_prior(prior, a)?),
        _ => None,
    };

    let outcomes: Vec<Option<ProblemRecord<T>>> = (0..n_test)
        .into_par_iter()
        .map(|i| {
            let run = || -> Result<ProblemRecord<T>> {
                let mut draw_src = rng.fork(rng.stream() + 1 + i as u64);
                let x_star = reference.sample(&mut draw_src)?;
                let b = a.mul_vec(&x_star);
                let posterior = solve_posterior(
                    a,
                    prior,
                    prior_factor.as_ref(),
                    solver,
                    &b,
                    m,
                    rng,
                    options,
                )?;
                let (z, rank) = if need_z {
                    z_with_rank(&x_star, &posterior)?
                } else {
                    (T::zero(), 0)
                };
                let (s, trace) = if need_s {
                    let s = s_statistic(a, &x_star, posterior.mean())?;
                    let trace = posterior_a_trace(a, &posterior)?;
                    (s, trace)
                } else {
                    (T::zero(), T::zero())
                };
                Ok(ProblemRecord { z, rank, s, trace })
            };
            match run() {
                Ok(record) => Ok(Some(record)),
                Err(e) if is_recoverable(&e) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let mut raw = RawSamples {
        z_values: Vec::with_capacity(n_test),
        ranks: Vec::with_capacity(n_test),
        s_values: Vec::with_capacity(n_test),
        traces: Vec::with_capacity(n_test),
        skipped: 0,
    };
    for outcome in outcomes {
        match outcome {
            Some(record) => {
                if need_z {
                    raw.z_values.push(record.z);
                    raw.ranks.push(record.rank);
                }
                if need_s {
                    raw.s_values.push(record.s);
                    raw.traces.push(record.trace);
                }
            }
            None => raw.skipped += 1,
        }
    }
    if raw.skipped * 10 > n_test {
        return Err(Error::SkipBudgetExceeded {
            skipped: raw.skipped,
            total: n_test,
        });
    }
    Ok(raw)
}

/// Runs the selected solver on one test problem and returns its posterior.
#[allow(clippy::too_many_arguments)]
fn solve_posterior<T: Scalar>(
    a: &Arc<SpdMatrix<T>>,
    prior: &PriorSpec<T>,
    prior_factor: Option<&SymFactor<T>>,
    solver: SolverVariant,
    b: &DVector<T>,
    m: usize,
    rng: &RandomSource,
    options: &SamplingOptions<T>,
) -> Result<Gaussian<T>> {
    match solver {
        SolverVariant::RandomDirections => {
            // The master's own stream, re-forked per problem: every problem
            // sees the same search directions, so the posterior covariance
            // is a constant of the batch.
            let mut solver_src = rng.fork(rng.stream());
            let (posterior, _) =
                solvers::bayescg_random_directions(a, b, prior, m, &mut solver_src)?;
            Ok(posterior)
        }
        SolverVariant::InversePrior => {
            let f0 = prior_factor.expect("factored solver requires a prepared prior factor");
            let solve = solvers::bayescg_factored(a, b, &prior.mean, f0, m)?;
            Gaussian::from_factor(solve.mean, solve.factor)
        }
        SolverVariant::KrylovFull => {
            let (posterior, _) = solvers::krylov_full(a, b, &prior.mean, m, options.lanczos_eps)?;
            posterior.to_gaussian()
        }
        SolverVariant::KrylovApprox { rank } => {
            let (posterior, _) = solvers::krylov_approx(a, b, &prior.mean, m, rank)?;
            posterior.to_gaussian()
        }
    }
}

/// Square-root factor of the prior covariance for the factored solver.
fn factor_for_prior<T: Scalar>(prior: &PriorSpec<T>, a: &SpdMatrix<T>) -> Result<SymFactor<T>> {
    match &prior.cov {
        PriorCov::FactoredCov(f) => Ok(f.clone()),
        PriorCov::InverseOfA => solvers::inverse_prior_factor(a),
        PriorCov::Identity => Ok(SymFactor::new(DMatrix::identity(a.order(), a.order()))),
        PriorCov::DenseCov(s) => Ok(SymFactor::new(linalg::sym_sqrt(s)?)),
    }
}

// ---------------------------------------------------------------------------
// Verdicts
// ---------------------------------------------------------------------------

/// Classifies a Z-sample set. Calibrated when the KS value is at most
/// `ks_cal`; otherwise pessimistic when the sample mean falls below the
/// chi-squared mean (errors smaller than claimed) and optimistic when it
/// exceeds it. The evidence is the KS value.
pub fn verdict_from_z<T: Scalar>(
    zset: &ZSampleSet<T>,
    thresholds: &CalibrationThresholds<T>,
) -> Verdict<T> {
    let class = if zset.ks() <= thresholds.ks_cal {
        CalibrationClass::Calibrated
    } else if zset.mean() < zset.chi2_mean() {
        CalibrationClass::Pessimistic
    } else {
        CalibrationClass::Optimistic
    };
    Verdict {
        class,
        evidence: zset.ks(),
    }
}

/// Classifies an S-sample set by the relative gap between the empirical
/// mean `h` and the posterior trace mean. Calibrated when
/// `|h − trace_mean| / max(h, tiny) ≤ rel_cal`; otherwise pessimistic when
/// `h` falls below the trace mean. The evidence is signed,
/// `(h − trace_mean) / max(h, tiny)`, so its sign flags the direction even
/// for calibrated sets.
pub fn verdict_from_s<T: Scalar>(
    sset: &SSampleSet<T>,
    thresholds: &CalibrationThresholds<T>,
) -> Verdict<T> {
    let scale = sset.h().max(conv(EVIDENCE_FLOOR));
    let evidence = (sset.h() - sset.trace_mean()) / scale;
    let class = if evidence.abs() <= thresholds.rel_cal {
        CalibrationClass::Calibrated
    } else if sset.h() < sset.trace_mean() {
        CalibrationClass::Pessimistic
    } else {
        CalibrationClass::Optimistic
    };
    Verdict { class, evidence }
}

// ---------------------------------------------------------------------------
// Projector oracle
// ---------------------------------------------------------------------------

/// Result of [`chi_sq_projector_check`]: the KS distance of the squared
/// projected-sample norms to their matching chi-squared law, with the
/// projector's rank.
#[derive(Clone, Copy, Debug)]
pub struct ProjectorCheck<T: Scalar> {
    pub ks: T,
    pub rank: usize,
}

/// Monte-Carlo oracle for the fact that `‖P·g‖²` with `g ~ N(0, I)` and `P`
/// an orthogonal projector follows a chi-squared law with `rank(P)` degrees
/// of freedom.
///
/// Validates `P² = P` and `Pᵀ = P` to [`PROJECTOR_TOL`], draws `n_samples`
/// standard normal vectors, projects them (so their covariance is `P`), and
/// returns the KS distance of the squared norms to `χ²(rank(P))`. The rank
/// of an orthogonal projector equals its trace.
pub fn chi_sq_projector_check<T: Scalar>(
    p: &DMatrix<T>,
    n_samples: usize,
    rng: &mut RandomSource,
) -> Result<ProjectorCheck<T>> {
    if p.nrows() != p.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "projector must be square, got {}×{}",
            p.nrows(),
            p.ncols()
        )));
    }
    if n_samples == 0 {
        return Err(Error::Config("projector check needs at least one sample".into()));
    }
    let tol = conv::<T>(PROJECTOR_TOL);
    let sym_dev = (p - p.transpose()).norm();
    if sym_dev > tol {
        return Err(Error::NonProjector(format!(
            "matrix is not symmetric: deviation {sym_dev:e}"
        )));
    }
    let idem_dev = (p * p - p).norm();
    if idem_dev > tol {
        return Err(Error::NonProjector(format!(
            "matrix is not idempotent: deviation {idem_dev:e}"
        )));
    }
    let trace = p.diagonal().iter().fold(T::zero(), |acc, &d| acc + d);
    let rank = trace
        .round()
        .to_usize()
        .ok_or_else(|| Error::NonProjector(format!("projector trace {trace:e} is not a rank")))?;
    if rank == 0 {
        // The zero projector sends every sample to 0: degenerate, KS moot.
        return Ok(ProjectorCheck {
            ks: T::zero(),
            rank: 0,
        });
    }
    let n = p.nrows();
    let mut samples: Vec<T> = (0..n_samples)
        .map(|_| {
            let g = rng.normal_vector::<T>(n);
            (p * g).norm_squared()
        })
        .collect();
    samples.sort_by(|x, y| x.partial_cmp(y).expect("squared norms are finite"));
    let ks = ks_statistic(&samples, |x| chi_square_cdf(rank, x));
    Ok(ProjectorCheck { ks, rank })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::RandomSource;
    use crate::solvers::{krylov_full, StopCriteria};

    fn random_spd(n: usize, src: &mut RandomSource) -> DMatrix<f64> {
        let m = DMatrix::from_fn(n, n, |_, _| src.normal::<f64>());
        &m * m.transpose() + DMatrix::identity(n, n) * (0.5 * n as f64)
    }

    fn shared_spd(n: usize, seed: u64) -> Arc<SpdMatrix<f64>> {
        let mut src = RandomSource::new(seed, 0);
        Arc::new(SpdMatrix::from_dense(random_spd(n, &mut src)).unwrap())
    }

    /// Rotated log-spaced spectrum spanning `decades` orders of magnitude.
    /// Such systems keep every Krylov expansion coefficient well above
    /// roundoff out to the full grade, unlike fast-converging spectra whose
    /// trailing coefficients sink into noise.
    fn slow_decay_spd(n: usize, decades: f64, seed: u64) -> Arc<SpdMatrix<f64>> {
        let mut src = RandomSource::new(seed, 0);
        let g = DMatrix::from_fn(n, n, |_, _| src.normal::<f64>());
        let q = g.qr().q();
        let d = DVector::from_fn(n, |i, _| {
            10f64.powf(decades * i as f64 / (n - 1) as f64)
        });
        let dense = linalg::symmetrized(&(&q * DMatrix::from_diagonal(&d) * q.transpose()));
        Arc::new(SpdMatrix::from_dense(dense).unwrap())
    }

    /// Inverse chi-squared CDF by bisection on the monotone forward map.
    fn chi2_quantile(dof: usize, p: f64) -> f64 {
        let (mut lo, mut hi) = (0.0, 1e4);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if chi_square_cdf(dof, mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// Closed forms: exponential at f = 2, half-normal at f = 1, and the
    /// f = 4 series value.
    #[test]
    fn chi_square_cdf_closed_forms() {
        let two_ln2 = 2.0 * std::f64::consts::LN_2;
        assert!((chi_square_cdf(2, two_ln2) - 0.5).abs() <= 1e-10);
        assert!((chi_square_cdf(1, 1.0f64) - 0.682_689_492_137_086).abs() <= 1e-10);
        // f = 4: F(x) = 1 − e^{−x/2}(1 + x/2); at x = 2 this is 1 − 2/e.
        let expected = 1.0 - 2.0 / std::f64::consts::E;
        assert!((chi_square_cdf(4, 2.0) - expected).abs() <= 1e-10);
        assert_eq!(chi_square_cdf::<f64>(3, 0.0), 0.0);
        assert_eq!(chi_square_cdf::<f64>(3, -5.0), 0.0);
    }

    /// The CDF is monotone in x with limits 0 and 1.
    #[test]
    fn chi_square_cdf_monotone_with_limits() {
        for dof in [1usize, 3, 7] {
            let mut last = 0.0;
            for k in 0..200 {
                let x = 0.25 * k as f64;
                let f = chi_square_cdf(dof, x);
                assert!(
                    f >= last - 1e-15,
                    "CDF decreased at dof {dof}, x {x}: {f} < {last}"
                );
                assert!((0.0..=1.0).contains(&f));
                last = f;
            }
            assert_eq!(chi_square_cdf(dof, 0.0), 0.0);
            assert!(chi_square_cdf(dof, 1e6) > 1.0 - 1e-12);
            assert_eq!(chi_square_cdf(dof, f64::INFINITY), 1.0);
        }
    }

    /// A single sample at the reference median gives a sup-distance of 0.5.
    #[test]
    fn ks_single_sample_at_median() {
        let median = chi2_quantile(2, 0.5);
        let d = ks_statistic(&[median], |x| chi_square_cdf(2, x));
        assert!((d - 0.5).abs() <= 1e-9, "KS {d} should be 0.5");
    }

    /// Samples entirely below the reference's support give the maximal
    /// distance 1.
    #[test]
    fn ks_disjoint_support_is_one() {
        let samples = [-3.0, -2.0, -1.0];
        let d = ks_statistic(&samples, |x| chi_square_cdf(1, x));
        assert_eq!(d, 1.0);
    }

    /// Samples placed exactly at the quantiles i/(N+1) keep the distance at
    /// or below 1/(N+1).
    #[test]
    fn ks_quantile_construction_is_small() {
        let n = 99;
        let samples: Vec<f64> = (1..=n)
            .map(|i| chi2_quantile(3, i as f64 / (n + 1) as f64))
            .collect();
        let d = ks_statistic(&samples, |x| chi_square_cdf(3, x));
        assert!(
            d <= 1.0 / (n + 1) as f64 + 1e-9,
            "KS {d} exceeds the quantile-construction bound"
        );
    }

    /// Draws from the reference itself stay below the 99% critical value
    /// 1.63/√N for at least 19 of 20 seeds.
    #[test]
    fn ks_null_distribution_respects_critical_bound() {
        let n = 1000;
        let bound = 1.63 / (n as f64).sqrt();
        let mut passes = 0;
        for seed in 0..20 {
            let mut src = RandomSource::new(1000 + seed, 0);
            let mut samples: Vec<f64> = (0..n)
                .map(|_| {
                    (0..4)
                        .map(|_| {
                            let g = src.normal::<f64>();
                            g * g
                        })
                        .sum()
                })
                .collect();
            samples.sort_by(|x, y| x.partial_cmp(y).unwrap());
            let d = ks_statistic(&samples, |x| chi_square_cdf(4, x));
            if d <= bound {
                passes += 1;
            }
        }
        assert!(passes >= 19, "only {passes}/20 seeds under the 99% bound");
    }

    /// Perfect mean → 0; identity covariance with a unit-vector error → 1.
    #[test]
    fn z_statistic_trivial_cases() {
        let mean = DVector::from_vec(vec![1.0f64, 2.0, 3.0]);
        let posterior =
            Gaussian::new_dense(mean.clone(), DMatrix::identity(3, 3)).unwrap();
        assert_eq!(z_statistic(&mean, &posterior).unwrap(), 0.0);
        let mut x_star = mean.clone();
        x_star[0] += 1.0;
        let z = z_statistic(&x_star, &posterior).unwrap();
        assert!((z - 1.0).abs() <= 1e-12);
    }

    /// For a full Krylov posterior evaluated at the exact solution the
    /// Z-statistic equals the residual dimension g − m at every m.
    #[test]
    fn z_statistic_full_krylov_counts_remaining_directions() {
        let a = slow_decay_spd(40, 8.0, 91);
        let mut src = RandomSource::new(92, 0);
        let x_star = src.normal_vector::<f64>(40);
        let b = a.mul_vec(&x_star);
        let x0 = DVector::zeros(40);
        for m in [1usize, 7, 20, 33, 39] {
            let (posterior, _) = krylov_full(&a, &b, &x0, m, 1e-12).unwrap();
            let g = posterior.grade();
            assert!(m < g, "test needs m below the grade");
            assert_eq!(posterior.rank_bound(), g - m);
            let gaussian = posterior.to_gaussian().unwrap();
            let z = z_statistic(&x_star, &gaussian).unwrap();
            let expected = (g - m) as f64;
            assert!(
                (z - expected).abs() <= 1e-6 * expected,
                "m {m}: z {z} differs from {expected}"
            );
        }
    }

    /// The factored pseudoinverse annihilates vectors orthogonal to the
    /// factor range.
    #[test]
    fn krylov_pinv_kernel_component_maps_to_zero() {
        let a = Arc::new(SpdMatrix::<f64>::identity(5));
        let v = DMatrix::from_fn(5, 1, |i, _| if i == 0 { 1.0 } else { 0.0 });
        let k = KrylovCov::new(v, DVector::from_vec(vec![2.0]), Arc::clone(&a)).unwrap();
        let y = DVector::from_fn(5, |i, _| if i == 1 { 3.0 } else { 0.0 });
        let out = krylov_cov_pinv_apply(&k, &y).unwrap();
        assert!(out.norm() <= 1e-14);
    }

    /// Single non-unit column: the pseudoinverse is v·(vᵀy)/(φ‖v‖₂⁴).
    #[test]
    fn krylov_pinv_rank_one_hand_formula() {
        // v is orthonormal in the weighted inner product of A = I/4 while
        // ‖v‖₂ = 2, which separates the ‖v‖⁴ structure from φ.
        let a = Arc::new(SpdMatrix::from_dense(DMatrix::identity(3, 3) * 0.25).unwrap());
        let v = DMatrix::from_column_slice(3, 1, &[2.0f64, 0.0, 0.0]);
        let phi = 0.7;
        let k = KrylovCov::new(v.clone(), DVector::from_vec(vec![phi]), a).unwrap();
        let y = DVector::from_vec(vec![1.0, 2.0, 5.0]);
        let out = krylov_cov_pinv_apply(&k, &y).unwrap();
        let v0 = v.column(0);
        let expected = &v0 * (v0.dot(&y) / (phi * v0.norm().powi(4)));
        assert!((out - expected).norm() <= 1e-12);
    }

    /// The closed-form pseudoinverse agrees with an SVD pseudoinverse of the
    /// materialized covariance on order-30 instances.
    #[test]
    fn krylov_pinv_matches_svd_pseudo_inverse() {
        let a = slow_decay_spd(30, 2.0, 71);
        let mut src = RandomSource::new(72, 0);
        let r0 = src.normal_vector::<f64>(30);
        let v = crate::solvers::modified_lanczos(a.as_ref(), &r0, 8, 1e-12).unwrap();
        let k = v.ncols();
        let phi = DVector::from_fn(k, |i, _| 10f64.powf(2.0 * i as f64 / k as f64 - 1.0));
        let k = KrylovCov::new(v, phi, Arc::clone(&a)).unwrap();
        let oracle = linalg::pseudo_inverse(&k.to_dense(), None).unwrap();
        for trial in 0..3 {
            let y = RandomSource::new(73 + trial, 0).normal_vector::<f64>(30);
            let fast = krylov_cov_pinv_apply(&k, &y).unwrap();
            let slow = &oracle * &y;
            assert!(
                (&fast - &slow).norm() <= 1e-8 * (1.0 + slow.norm()),
                "trial {trial}: routes differ by {:e}",
                (fast - slow).norm()
            );
        }
    }

    /// Nearly dependent factor columns are rejected instead of silently
    /// amplifying noise.
    #[test]
    fn krylov_pinv_rejects_ill_conditioned_factors() {
        let a = Arc::new(SpdMatrix::<f64>::identity(4));
        let mut v = DMatrix::zeros(4, 2);
        v[(0, 0)] = 1.0;
        v[(0, 1)] = 1.0;
        v[(1, 1)] = 1e-9;
        let k = KrylovCov::new(v, DVector::from_vec(vec![1.0, 1.0]), a).unwrap();
        let y = DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0]);
        let err = krylov_cov_pinv_apply(&k, &y).unwrap_err();
        assert!(matches!(err, Error::IllConditionedFactors(_)));
    }

    /// The Z-statistic is a function of the distribution, not its storage:
    /// factored and dense covariance representations agree.
    #[test]
    fn z_statistic_invariant_under_representation() {
        let a = slow_decay_spd(30, 2.0, 81);
        let mut src = RandomSource::new(82, 0);
        let r0 = src.normal_vector::<f64>(30);
        let v = crate::solvers::modified_lanczos(a.as_ref(), &r0, 9, 1e-12).unwrap();
        let k = v.ncols();
        let phi = DVector::from_fn(k, |i, _| 0.5 + i as f64);
        let mean = src.normal_vector::<f64>(30);
        let factored = Gaussian::from_krylov(
            mean.clone(),
            KrylovCov::new(v, phi, Arc::clone(&a)).unwrap(),
        )
        .unwrap();
        let dense = Gaussian::new_dense(mean, factored.covariance_dense()).unwrap();
        let probe = RandomSource::new(83, 0).normal_vector::<f64>(30);
        let z_fact = z_statistic(&probe, &factored).unwrap();
        let z_dense = z_statistic(&probe, &dense).unwrap();
        assert!(
            (z_fact - z_dense).abs() <= 1e-7 * (1.0 + z_fact.abs()),
            "representations disagree: {z_fact} vs {z_dense}"
        );
    }

    /// S-statistic basics: zero at the solution, squared 2-norm under the
    /// identity operator.
    #[test]
    fn s_statistic_trivial_cases() {
        let a = SpdMatrix::<f64>::identity(3);
        let x = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(s_statistic(&a, &x, &x).unwrap(), 0.0);
        let y = DVector::from_vec(vec![2.0, 2.0, 1.0]);
        let s = s_statistic(&a, &x, &y).unwrap();
        assert!((s - 5.0).abs() <= 1e-14);
    }

    /// Sample-set constructors: rounding-floor clamping, lower-median dof
    /// with its minimum of 1, and the trace moments.
    #[test]
    fn sample_set_constructors_enforce_invariants() {
        let zset = ZSampleSet::new(vec![1.0f64, -5e-11, 2.0], &[3, 4, 7], 1).unwrap();
        assert_eq!(zset.samples()[1], 0.0);
        assert_eq!(zset.dof(), 4);
        assert_eq!(zset.skipped(), 1);
        assert!((zset.mean() - 1.0).abs() <= 1e-15);
        assert!(ZSampleSet::new(vec![1.0, -1e-3], &[1, 1], 0).is_err());
        assert!(ZSampleSet::new(Vec::<f64>::new(), &[], 0).is_err());
        assert_eq!(ZSampleSet::new(vec![0.0], &[0], 0).unwrap().dof(), 1);
        // Even count takes the lower median.
        assert_eq!(
            ZSampleSet::new(vec![1.0, 1.0, 1.0, 1.0], &[2, 3, 5, 9], 0)
                .unwrap()
                .dof(),
            3
        );

        let sset = SSampleSet::new(vec![1.0, 3.0], vec![2.0, 4.0], 0).unwrap();
        assert_eq!(sset.h(), 2.0);
        assert_eq!(sset.trace_mean(), 3.0);
        assert!((sset.trace_std() - std::f64::consts::SQRT_2).abs() <= 1e-12);
        assert_eq!(
            SSampleSet::new(vec![1.0], vec![2.0], 0).unwrap().trace_std(),
            0.0
        );
        assert!(SSampleSet::new(vec![1.0], vec![1.0, 2.0], 0).is_err());
    }

    /// Z-verdicts: chi-squared draws classify as calibrated, deflated and
    /// inflated samples as pessimistic and optimistic.
    #[test]
    fn verdicts_from_z_cover_all_classes() {
        let dof = 5usize;
        let mut src = RandomSource::new(55, 0);
        let draws: Vec<f64> = (0..500)
            .map(|_| {
                (0..dof)
                    .map(|_| {
                        let g = src.normal::<f64>();
                        g * g
                    })
                    .sum()
            })
            .collect();
        let ranks = vec![dof; draws.len()];
        let thresholds = CalibrationThresholds::default();

        let calibrated = ZSampleSet::new(draws.clone(), &ranks, 0).unwrap();
        let v = verdict_from_z(&calibrated, &thresholds);
        assert_eq!(v.class, CalibrationClass::Calibrated);
        assert_eq!(v.evidence, calibrated.ks());

        let deflated: Vec<f64> = draws.iter().map(|z| z * 0.05).collect();
        let pess = ZSampleSet::new(deflated, &ranks, 0).unwrap();
        assert_eq!(
            verdict_from_z(&pess, &thresholds).class,
            CalibrationClass::Pessimistic
        );

        let inflated: Vec<f64> = draws.iter().map(|z| z * 20.0).collect();
        let opt = ZSampleSet::new(inflated, &ranks, 0).unwrap();
        assert_eq!(
            verdict_from_z(&opt, &thresholds).class,
            CalibrationClass::Optimistic
        );
    }

    /// S-verdicts compare means with signed evidence.
    #[test]
    fn verdicts_from_s_cover_all_classes() {
        let thresholds = CalibrationThresholds::default();
        let near = SSampleSet::new(vec![1.0f64; 4], vec![1.05; 4], 0).unwrap();
        let v = verdict_from_s(&near, &thresholds);
        assert_eq!(v.class, CalibrationClass::Calibrated);
        assert!((v.evidence + 0.05).abs() <= 1e-12, "evidence keeps its sign");

        let low = SSampleSet::new(vec![0.5; 4], vec![1.0; 4], 0).unwrap();
        assert_eq!(
            verdict_from_s(&low, &thresholds).class,
            CalibrationClass::Pessimistic
        );

        let high = SSampleSet::new(vec![2.0f64; 4], vec![1.0; 4], 0).unwrap();
        let v = verdict_from_s(&high, &thresholds);
        assert_eq!(v.class, CalibrationClass::Optimistic);
        assert!((v.evidence - 0.5).abs() <= 1e-12);
    }

    /// Full-posterior Krylov sampling: every z equals g − m, so the set's
    /// dof is g − m and samples sit on the chi-squared mean.
    #[test]
    fn sample_z_full_krylov_is_degenerate_at_remaining_rank() {
        let n = 25;
        let a = slow_decay_spd(n, 6.0, 61);
        let prior = PriorSpec::inverse_of_a(DVector::zeros(n));
        let reference = prior.to_gaussian(&a).unwrap();
        let m = 10;
        let master = RandomSource::new(62, 1);
        let zset = sample_z(
            &a,
            &prior,
            &reference,
            SolverVariant::KrylovFull,
            m,
            40,
            &master,
        )
        .unwrap();
        assert_eq!(zset.len(), 40);
        assert_eq!(zset.skipped(), 0);
        assert_eq!(zset.dof(), n - m);
        let expected = (n - m) as f64;
        for &z in zset.samples() {
            assert!(
                (z - expected).abs() <= 1e-6 * expected,
                "z {z} drifted from {expected}"
            );
        }
        assert!((zset.mean() - zset.chi2_mean()).abs() <= 1e-5 * expected);
    }

    /// Full-posterior Krylov sampling: each sᵢ equals its own tᵢ, the
    /// squared-error/trace identity, per sample.
    #[test]
    fn sample_s_full_krylov_matches_traces_per_sample() {
        let n = 25;
        let a = shared_spd(n, 63);
        let prior = PriorSpec::inverse_of_a(DVector::zeros(n));
        let reference = prior.to_gaussian(&a).unwrap();
        let master = RandomSource::new(64, 1);
        let sset = sample_s(
            &a,
            &prior,
            &reference,
            SolverVariant::KrylovFull,
            8,
            30,
            &master,
        )
        .unwrap();
        assert_eq!(sset.len(), 30);
        for (i, (&s, &t)) in sset.s_samples().iter().zip(sset.traces()).enumerate() {
            assert!(
                (s - t).abs() <= 1e-6 * t.max(1e-30),
                "problem {i}: s {s} vs trace {t}"
            );
        }
    }

    /// The combined driver reproduces the two single-statistic drivers
    /// exactly: shared problems mean shared draws.
    #[test]
    fn combined_driver_matches_individual_drivers() {
        let n = 20;
        let a = shared_spd(n, 65);
        let prior = PriorSpec::inverse_of_a(DVector::zeros(n));
        let reference = prior.to_gaussian(&a).unwrap();
        let master = RandomSource::new(66, 1);
        let solver = SolverVariant::KrylovApprox { rank: 4 };
        let (zset, sset) = sample_z_and_s(
            &a,
            &prior,
            &reference,
            solver,
            6,
            15,
            &master,
            &SamplingOptions::default(),
        )
        .unwrap();
        let z_only = sample_z(&a, &prior, &reference, solver, 6, 15, &master).unwrap();
        let s_only = sample_s(&a, &prior, &reference, solver, 6, 15, &master).unwrap();
        assert_eq!(zset.samples(), z_only.samples());
        assert_eq!(zset.dof(), z_only.dof());
        assert_eq!(sset.s_samples(), s_only.s_samples());
        assert_eq!(sset.traces(), s_only.traces());
    }

    /// Random-direction sampling under the operator-inverse prior: the
    /// posterior trace is a constant of the batch (covariance independent of
    /// b) and the S-mean matches it within 10%.
    #[test]
    fn sample_s_random_directions_trace_calibration() {
        let n = 50;
        let a = shared_spd(n, 67);
        let prior = PriorSpec::inverse_of_a(DVector::zeros(n));
        let reference = prior.to_gaussian(&a).unwrap();
        let master = RandomSource::new(68, 1);
        let sset = sample_s(
            &a,
            &prior,
            &reference,
            SolverVariant::RandomDirections,
            10,
            2000,
            &master,
        )
        .unwrap();
        assert_eq!(sset.len(), 2000);
        let t = sset.trace_mean();
        let (t_min, t_max) = sset
            .traces()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        assert!(
            (t_max - t_min).abs() <= 1e-10 * t,
            "traces vary: [{t_min}, {t_max}]"
        );
        assert!(
            (sset.h() - t).abs() <= 0.1 * t,
            "mean error {} drifted from trace {t}",
            sset.h()
        );
        let verdict = verdict_from_s(&sset, &CalibrationThresholds::default());
        assert_eq!(verdict.class, CalibrationClass::Calibrated);
    }

    /// A zero prior covariance makes every problem break down, tripping the
    /// skip budget.
    #[test]
    fn sampling_enforces_skip_budget() {
        let n = 6;
        let a = shared_spd(n, 69);
        let prior = PriorSpec::dense(DVector::zeros(n), DMatrix::zeros(n, n));
        let reference = Gaussian::new_dense(DVector::zeros(n), DMatrix::identity(n, n)).unwrap();
        let master = RandomSource::new(70, 1);
        let err = sample_z(
            &a,
            &prior,
            &reference,
            SolverVariant::InversePrior,
            3,
            10,
            &master,
        )
        .unwrap_err();
        match err {
            Error::SkipBudgetExceeded { skipped, total } => {
                assert_eq!(skipped, 10);
                assert_eq!(total, 10);
            }
            other => panic!("expected skip-budget error, got {other:?}"),
        }
    }

    /// Identity projector: squared norms are standard chi-squared and the
    /// KS value stays below the 95% critical bound at N = 10⁴.
    #[test]
    fn projector_check_identity_matches_chi_square() {
        let p = DMatrix::<f64>::identity(4, 4);
        let mut src = RandomSource::new(75, 0);
        let check = chi_sq_projector_check(&p, 10_000, &mut src).unwrap();
        assert_eq!(check.rank, 4);
        assert!(
            check.ks <= 1.36 / (10_000f64).sqrt(),
            "KS {} exceeds the critical bound",
            check.ks
        );
    }

    /// Zero projector: degenerate, rank 0, KS reported as 0.
    #[test]
    fn projector_check_zero_is_degenerate() {
        let p = DMatrix::<f64>::zeros(4, 4);
        let mut src = RandomSource::new(76, 0);
        let check = chi_sq_projector_check(&p, 100, &mut src).unwrap();
        assert_eq!(check.rank, 0);
        assert_eq!(check.ks, 0.0);
    }

    /// A random rank-5 projector in dimension 20 passes the same bound, and
    /// non-projectors are rejected.
    #[test]
    fn projector_check_random_rank_five() {
        let mut src = RandomSource::new(77, 0);
        let g = DMatrix::from_fn(20, 5, |_, _| src.normal::<f64>());
        let q = g.qr().q();
        let p = &q * q.transpose();
        let check = chi_sq_projector_check(&p, 10_000, &mut src).unwrap();
        assert_eq!(check.rank, 5);
        assert!(
            check.ks <= 1.36 / (10_000f64).sqrt(),
            "KS {} exceeds the critical bound",
            check.ks
        );
        let not_projector = DMatrix::<f64>::identity(3, 3) * 0.5;
        assert!(matches!(
            chi_sq_projector_check(&not_projector, 10, &mut src).unwrap_err(),
            Error::NonProjector(_)
        ));
    }

    /// CG consistency probe: the inverse-prior sampling mean matches the CG
    /// iterate, so the sampled S-statistic is the true squared A-norm error.
    #[test]
    fn sample_s_inverse_prior_tracks_cg_error() {
        let n = 20;
        let a = shared_spd(n, 78);
        let prior = PriorSpec::inverse_of_a(DVector::zeros(n));
        let reference = prior.to_gaussian(&a).unwrap();
        let master = RandomSource::new(79, 1);
        let m = 5;
        let sset = sample_s(
            &a,
            &prior,
            &reference,
            SolverVariant::InversePrior,
            m,
            10,
            &master,
        )
        .unwrap();
        // Replay problem 0 by hand: same stream layout as the driver.
        let mut draw_src = master.fork(master.stream() + 1);
        let x_star = reference.sample(&mut draw_src).unwrap();
        let b = a.mul_vec(&x_star);
        let cg_trace = crate::solvers::cg(
            &a,
            &b,
            &DVector::zeros(n),
            StopCriteria::new(m, 0.0),
        )
        .unwrap();
        let e = &x_star - cg_trace.final_iterate();
        let expected = linalg::a_inner(a.as_ref(), &e, &e).unwrap();
        assert!(
            (sset.s_samples()[0] - expected).abs() <= 1e-8 * expected.max(1e-30),
            "sampled {} vs replayed {expected}",
            sset.s_samples()[0]
        );
    }
}
