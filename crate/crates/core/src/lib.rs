//! Probabilistic Krylov linear solvers with posterior calibration diagnostics.
//!
//! The library solves symmetric positive definite systems `A x = b` with
//! Bayesian conjugate-gradient variants that return a Gaussian posterior over
//! the solution instead of a point estimate, and provides the statistical
//! machinery to decide whether those posteriors mean what they claim:
//!
//! * [`linalg`] — dense/sparse SPD primitives: weighted norms, symmetric
//!   square roots, pseudoinverses, numerical rank, minimal-norm solves.
//! * [`gaussian`] — Gaussian values with dense, factored, and low-rank
//!   Krylov covariance representations; seeded sampling, affine pushforwards,
//!   conditioning, and quadratic-form expectations.
//! * [`solvers`] — CG, Bayesian CG under general priors (iterative, direct,
//!   factored, random-search-direction), a reorthogonalized Lanczos basis
//!   builder, and Krylov-prior solvers with full or rank-`d` posteriors.
//! * [`wasserstein`] — closed-form 2- and A-weighted Wasserstein distances
//!   between Gaussians, including the exact truncation distance between full
//!   and approximate Krylov posteriors.
//! * [`calibration`] — Z- and S-statistics, chi-squared reference CDF,
//!   Kolmogorov-Smirnov comparison, Monte Carlo sampling drivers, verdicts.
//! * [`experiment`] — Matrix Market ingestion, Jacobi preconditioning,
//!   builtin test-matrix generators, the experiment runner, and CSV/SVG
//!   report emission. The `krylov-calibrate` binary wraps this module.
//!
//! All numerics are generic over the scalar type through [`Scalar`]
//! (implemented for `f32` and `f64`); concrete `*64`/`*32` aliases live at
//! the crate root.

pub mod calibration;
pub mod experiment;
pub mod gaussian;
pub mod linalg;
pub mod solvers;
pub mod wasserstein;

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating-point scalar all numerics are generic over: `f32` or `f64`.
///
/// Bundles the field/ordering operations of [`nalgebra::RealField`] with the
/// integer conversions of num-traits and a hook for drawing standard-normal
/// variates, so solver and statistics code never names a concrete float type.
pub trait Scalar:
    RealField + FromPrimitive + ToPrimitive + Copy + std::fmt::Display + std::fmt::LowerExp
{
    /// Draws one standard-normal variate (ziggurat method, fixed per build).
    fn standard_normal<R: rand::Rng + ?Sized>(rng: &mut R) -> Self;

    /// Machine epsilon of the working precision.
    fn machine_eps() -> Self;
}

impl Scalar for f32 {
    fn standard_normal<R: rand::Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(rand_distr::StandardNormal)
    }

    fn machine_eps() -> Self {
        f32::EPSILON
    }
}

impl Scalar for f64 {
    fn standard_normal<R: rand::Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(rand_distr::StandardNormal)
    }

    fn machine_eps() -> Self {
        f64::EPSILON
    }
}

/// Converts an `f64` constant into the working scalar type.
///
/// Panics only if the conversion is unrepresentable, which cannot happen for
/// the finite tolerances this crate feeds it.
pub(crate) fn conv<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("finite f64 constant converts to the working scalar")
}

/// Errors shared by every module of the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes do not agree.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    /// A matrix required to be positive semi-definite has an eigenvalue below
    /// the tolerated rounding band.
    #[error("matrix is not positive semi-definite: {0}")]
    NotPsd(String),
    /// Dense decompositions are limited to moderate orders.
    #[error("order {order} exceeds the dense decomposition limit {limit}")]
    TooLargeForDense { order: usize, limit: usize },
    /// An iterative solver hit a zero or negative curvature/normalization
    /// quantity and cannot continue.
    #[error("solver breakdown: {0}")]
    Breakdown(String),
    /// The information (Gram) matrix of the supplied search directions is
    /// numerically singular.
    #[error("search-direction information matrix is numerically singular: {0}")]
    SingularInformation(String),
    /// Low-rank covariance factors are too ill-conditioned to invert.
    #[error("ill-conditioned low-rank factors: {0}")]
    IllConditionedFactors(String),
    /// A matrix expected to be an orthogonal projector is not one.
    #[error("matrix is not an orthogonal projector: {0}")]
    NonProjector(String),
    /// Malformed input file.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    /// Invalid experiment or CLI configuration.
    #[error("invalid configuration: {0}")]
    Config(String),
    /// Too many test problems failed with solver breakdowns.
    #[error("{skipped} of {total} test problems broke down, exceeding the 10% skip budget")]
    SkipBudgetExceeded { skipped: usize, total: usize },
    /// Underlying I/O failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

pub type SpdMatrix64 = linalg::SpdMatrix<f64>;
pub type SpdMatrix32 = linalg::SpdMatrix<f32>;
pub type SymFactor64 = linalg::SymFactor<f64>;
pub type SymFactor32 = linalg::SymFactor<f32>;
pub type Gaussian64 = gaussian::Gaussian<f64>;
pub type Gaussian32 = gaussian::Gaussian<f32>;
pub type PriorSpec64 = solvers::PriorSpec<f64>;
pub type PriorSpec32 = solvers::PriorSpec<f32>;
pub type SolveTrace64 = solvers::SolveTrace<f64>;
pub type SolveTrace32 = solvers::SolveTrace<f32>;
pub type KrylovPosterior64 = solvers::KrylovPosterior<f64>;
pub type KrylovPosterior32 = solvers::KrylovPosterior<f32>;
pub type WassersteinResult64 = wasserstein::WassersteinResult<f64>;
pub type WassersteinResult32 = wasserstein::WassersteinResult<f32>;
pub type ZSampleSet64 = calibration::ZSampleSet<f64>;
pub type ZSampleSet32 = calibration::ZSampleSet<f32>;
pub type SSampleSet64 = calibration::SSampleSet<f64>;
pub type SSampleSet32 = calibration::SSampleSet<f32>;
pub type Verdict64 = calibration::Verdict<f64>;
pub type Verdict32 = calibration::Verdict<f32>;
pub type ExperimentReport64 = experiment::ExperimentReport<f64>;
pub type ExperimentReport32 = experiment::ExperimentReport<f32>;
