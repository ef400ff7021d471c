//! Gaussian distribution values with multiple covariance representations.
//!
//! A [`Gaussian`] couples a mean vector with one of four covariance forms:
//! dense symmetric, low-rank factored `F·Fᵀ`, Krylov factors `V·Φ·Vᵀ` with
//! `V` orthonormal in the inner product of a reference operator, or an exact
//! point mass ([`Covariance::Dirac`]). The module supplies seeded sampling
//! through the stability transform `x + F·z`, affine pushforwards,
//! conditioning on linear observations, and closed-form expectations of
//! quadratic forms — the distributional toolkit the solvers and calibration
//! statistics are built on.

use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::linalg::{self, SpdMatrix, SymFactor};
use crate::{conv, Error, Result, Scalar};

/// Frobenius tolerance for the weighted-orthonormality check of Krylov
/// covariance factors.
pub const KRYLOV_ORTHONORMALITY_TOL: f64 = 1e-8;

// ---------------------------------------------------------------------------
// RandomSource
// ---------------------------------------------------------------------------

/// Deterministic random generator identified by a master seed and a stream
/// index.
///
/// Identical `(seed, stream)` pairs reproduce identical sample sequences
/// bit-for-bit on one platform. Parallel work must give every unit of work
/// its own stream via [`RandomSource::fork`]; a single stream is never to be
/// shared across threads.
///
/// Standard-normal variates come from the ziggurat method (fixed per build).
#[derive(Clone, Debug)]
pub struct RandomSource {
    seed: u64,
    stream: u64,
    rng: ChaCha12Rng,
}

impl RandomSource {
    /// Creates the generator for the given master seed and stream index.
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        RandomSource { seed, stream, rng }
    }

    /// Master seed this source was created with.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Stream index this source draws from.
    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// A fresh source on the same master seed but a different stream,
    /// independent of how much this source has already produced.
    pub fn fork(&self, stream: u64) -> Self {
        RandomSource::new(self.seed, stream)
    }

    /// One standard-normal variate.
    pub fn normal<T: Scalar>(&mut self) -> T {
        T::standard_normal(&mut self.rng)
    }

    /// A vector of independent standard-normal variates.
    pub fn normal_vector<T: Scalar>(&mut self, n: usize) -> DVector<T> {
        DVector::from_fn(n, |_, _| self.normal())
    }
}

// ---------------------------------------------------------------------------
// Covariance representations
// ---------------------------------------------------------------------------

/// Low-rank covariance `V·diag(φ)·Vᵀ` whose columns are orthonormal in the
/// inner product induced by a reference operator `A` (`VᵀAV = I`).
#[derive(Clone, Debug)]
pub struct KrylovCov<T: Scalar> {
    v: DMatrix<T>,
    phi: DVector<T>,
    a: Arc<SpdMatrix<T>>,
}

impl<T: Scalar> KrylovCov<T> {
    /// Wraps factor columns `V` (n×k), positive weights `φ` (k), and the
    /// reference operator. Shapes must agree and every weight must be
    /// strictly positive; the orthonormality invariant is checked on demand
    /// by [`Gaussian::validate`].
    pub fn new(v: DMatrix<T>, phi: DVector<T>, a: Arc<SpdMatrix<T>>) -> Result<Self> {
        if v.nrows() != a.order() {
            return Err(Error::DimensionMismatch(format!(
                "factor rows {} do not match operator order {}",
                v.nrows(),
                a.order()
            )));
        }
        if v.ncols() != phi.len() {
            return Err(Error::DimensionMismatch(format!(
                "factor columns {} do not match weight count {}",
                v.ncols(),
                phi.len()
            )));
        }
        for &p in phi.iter() {
            if p <= T::zero() {
                return Err(Error::NotPsd(format!(
                    "nonpositive covariance weight {p:e}"
                )));
            }
        }
        Ok(KrylovCov { v, phi, a })
    }

    /// Factor columns `V`.
    pub fn columns(&self) -> &DMatrix<T> {
        &self.v
    }

    /// Positive diagonal weights `φ`.
    pub fn weights(&self) -> &DVector<T> {
        &self.phi
    }

    /// Reference operator defining the weighted inner product.
    pub fn operator(&self) -> &Arc<SpdMatrix<T>> {
        &self.a
    }

    /// Number of factor columns (an upper bound on the covariance rank).
    pub fn rank_bound(&self) -> usize {
        self.v.ncols()
    }

    /// Materializes `V·diag(φ)·Vᵀ`.
    pub fn to_dense(&self) -> DMatrix<T> {
        &self.v * DMatrix::from_diagonal(&self.phi) * self.v.transpose()
    }

    /// The square-root factor `V·diag(√φ)`.
    pub fn sqrt_factor(&self) -> DMatrix<T> {
        let mut f = self.v.clone();
        for (j, &p) in self.phi.iter().enumerate() {
            let s = p.sqrt();
            for i in 0..f.nrows() {
                f[(i, j)] *= s;
            }
        }
        f
    }
}

/// Covariance of a [`Gaussian`], in one of four representations.
#[derive(Clone, Debug)]
pub enum Covariance<T: Scalar> {
    /// Explicit symmetric positive semi-definite matrix.
    Dense(DMatrix<T>),
    /// Low-rank factored form `Σ = F·Fᵀ`.
    Factored(SymFactor<T>),
    /// Weighted-orthonormal low-rank form `Σ = V·diag(φ)·Vᵀ`.
    KrylovFactors(KrylovCov<T>),
    /// Exact point mass, `Σ = 0`.
    Dirac,
}

// ---------------------------------------------------------------------------
// Gaussian
// ---------------------------------------------------------------------------

/// Gaussian distribution: mean vector plus covariance representation.
///
/// Values are immutable and shareable across threads; the square-root factor
/// used by [`Gaussian::sample`] is computed once on first use and cached.
pub struct Gaussian<T: Scalar> {
    mean: DVector<T>,
    cov: Covariance<T>,
    sqrt_cache: OnceLock<DMatrix<T>>,
}

impl<T: Scalar> Clone for Gaussian<T> {
    fn clone(&self) -> Self {
        Gaussian {
            mean: self.mean.clone(),
            cov: self.cov.clone(),
            sqrt_cache: OnceLock::new(),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Gaussian<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let kind = match &self.cov {
            Covariance::Dense(_) => "dense",
            Covariance::Factored(_) => "factored",
            Covariance::KrylovFactors(_) => "krylov-factors",
            Covariance::Dirac => "dirac",
        };
        write!(f, "Gaussian(dim={}, covariance={kind})", self.dim())
    }
}

impl<T: Scalar> Gaussian<T> {
    /// Gaussian with an explicit dense covariance; the matrix is symmetrized
    /// on construction, positive semi-definiteness is checked lazily where it
    /// matters (sampling, square roots).
    pub fn new_dense(mean: DVector<T>, cov: DMatrix<T>) -> Result<Self> {
        if cov.nrows() != cov.ncols() || cov.nrows() != mean.len() {
            return Err(Error::DimensionMismatch(format!(
                "mean length {} incompatible with covariance {}x{}",
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        Ok(Gaussian {
            mean,
            cov: Covariance::Dense(linalg::symmetrized(&cov)),
            sqrt_cache: OnceLock::new(),
        })
    }

    /// Gaussian with covariance `F·Fᵀ` held in factored form.
    pub fn from_factor(mean: DVector<T>, factor: SymFactor<T>) -> Result<Self> {
        if factor.order() != mean.len() {
            return Err(Error::DimensionMismatch(format!(
                "mean length {} incompatible with factor rows {}",
                mean.len(),
                factor.order()
            )));
        }
        Ok(Gaussian {
            mean,
            cov: Covariance::Factored(factor),
            sqrt_cache: OnceLock::new(),
        })
    }

    /// Gaussian with a Krylov-factor covariance.
    pub fn from_krylov(mean: DVector<T>, cov: KrylovCov<T>) -> Result<Self> {
        if cov.columns().nrows() != mean.len() {
            return Err(Error::DimensionMismatch(format!(
                "mean length {} incompatible with factor rows {}",
                mean.len(),
                cov.columns().nrows()
            )));
        }
        Ok(Gaussian {
            mean,
            cov: Covariance::KrylovFactors(cov),
            sqrt_cache: OnceLock::new(),
        })
    }

    /// Point mass at the given mean.
    pub fn dirac(mean: DVector<T>) -> Self {
        Gaussian {
            mean,
            cov: Covariance::Dirac,
            sqrt_cache: OnceLock::new(),
        }
    }

    /// Dimension of the distribution.
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Mean vector.
    pub fn mean(&self) -> &DVector<T> {
        &self.mean
    }

    /// Covariance in its stored representation.
    pub fn covariance(&self) -> &Covariance<T> {
        &self.cov
    }

    /// Whether this is an exact point mass.
    pub fn is_dirac(&self) -> bool {
        matches!(self.cov, Covariance::Dirac)
    }

    /// Materializes the covariance as a dense symmetric matrix.
    pub fn covariance_dense(&self) -> DMatrix<T> {
        match &self.cov {
            Covariance::Dense(s) => s.clone(),
            Covariance::Factored(f) => f.reconstruct(),
            Covariance::KrylovFactors(k) => k.to_dense(),
            Covariance::Dirac => DMatrix::zeros(self.dim(), self.dim()),
        }
    }

    /// Checks the representation invariants that are too costly for
    /// constructors: dense covariances must have no eigenvalue below the psd
    /// rounding band, Krylov factors must be orthonormal in their operator's
    /// inner product.
    pub fn validate(&self) -> Result<()> {
        match &self.cov {
            Covariance::Dense(s) => {
                // Reuses the square-root path, which performs exactly the
                // banded eigenvalue check required here.
                linalg::sym_sqrt(s).map(|_| ())
            }
            Covariance::KrylovFactors(k) => {
                let av = k.columns().clone();
                let mut weighted = DMatrix::zeros(av.nrows(), av.ncols());
                for j in 0..av.ncols() {
                    let col = av.column(j).into_owned();
                    weighted.set_column(j, &k.operator().mul_vec(&col));
                }
                let gram = k.columns().transpose() * weighted;
                let k_dim = gram.nrows();
                let dev = (&gram - DMatrix::<T>::identity(k_dim, k_dim)).norm();
                if dev > conv::<T>(KRYLOV_ORTHONORMALITY_TOL) {
                    return Err(Error::IllConditionedFactors(format!(
                        "weighted orthonormality deviation {dev:e} exceeds {KRYLOV_ORTHONORMALITY_TOL:e}"
                    )));
                }
                Ok(())
            }
            Covariance::Factored(_) | Covariance::Dirac => Ok(()),
        }
    }

    /// Square-root factor `F` with `Σ = F·Fᵀ`, cached after the first call.
    /// The Dirac representation yields an n×0 factor.
    pub fn sqrt_factor(&self) -> Result<&DMatrix<T>> {
        if let Some(f) = self.sqrt_cache.get() {
            return Ok(f);
        }
        let factor = match &self.cov {
            Covariance::Dense(s) => linalg::sym_sqrt(s)?,
            Covariance::Factored(f) => f.factor().clone(),
            Covariance::KrylovFactors(k) => k.sqrt_factor(),
            Covariance::Dirac => DMatrix::zeros(self.dim(), 0),
        };
        let _ = self.sqrt_cache.set(factor);
        Ok(self.sqrt_cache.get().expect("factor was just cached"))
    }

    /// Draws one sample by the stability transform `x + F·z` with `z`
    /// standard normal; the Dirac representation returns the mean.
    pub fn sample(&self, src: &mut RandomSource) -> Result<DVector<T>> {
        if self.is_dirac() {
            return Ok(self.mean.clone());
        }
        let f = self.sqrt_factor()?;
        let z = src.normal_vector::<T>(f.ncols());
        Ok(&self.mean + f * z)
    }

    /// Trace of `B·Σ` without materializing the product, dispatched on the
    /// covariance representation.
    pub fn cov_trace_with(&self, b: &SpdMatrix<T>) -> Result<T> {
        if b.order() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "weight order {} does not match distribution dimension {}",
                b.order(),
                self.dim()
            )));
        }
        match &self.cov {
            Covariance::Dense(s) => b.trace_product(s),
            Covariance::Factored(f) => {
                // trace(B·F·Fᵀ) = Σ_k f_kᵀ·B·f_k
                let mut acc = T::zero();
                for j in 0..f.width() {
                    let col = f.factor().column(j).into_owned();
                    acc += col.dot(&b.mul_vec(&col));
                }
                Ok(acc)
            }
            Covariance::KrylovFactors(k) => {
                // trace(B·V·Φ·Vᵀ) = Σ_i φ_i·v_iᵀ·B·v_i
                let mut acc = T::zero();
                for j in 0..k.rank_bound() {
                    let col = k.columns().column(j).into_owned();
                    acc += k.weights()[j] * col.dot(&b.mul_vec(&col));
                }
                Ok(acc)
            }
            Covariance::Dirac => Ok(T::zero()),
        }
    }

    /// Expected value of the quadratic form `XᵀBX` for `X` distributed by
    /// this Gaussian: `trace(B·Σ) + xᵀBx`.
    pub fn quadratic_form_mean(&self, b: &SpdMatrix<T>) -> Result<T> {
        let trace = self.cov_trace_with(b)?;
        let mean_term = self.mean.dot(&b.mul_vec(&self.mean));
        Ok(trace + mean_term)
    }

    /// Pushforward through the affine map `X ↦ y + F·X`: returns
    /// `N(y + F·x, F·Σ·Fᵀ)`. Factored covariances keep factored form
    /// (`F·F_g`); dense and Krylov representations are materialized densely;
    /// point masses stay point masses.
    pub fn affine_push(&self, f: &DMatrix<T>, y: &DVector<T>) -> Result<Gaussian<T>> {
        if f.ncols() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "map takes length-{} inputs, distribution has dimension {}",
                f.ncols(),
                self.dim()
            )));
        }
        if y.len() != f.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "offset length {} does not match map output dimension {}",
                y.len(),
                f.nrows()
            )));
        }
        let mean = y + f * &self.mean;
        let cov = match &self.cov {
            Covariance::Dense(s) => Covariance::Dense(linalg::symmetrized(&(f * s * f.transpose()))),
            Covariance::Factored(g) => Covariance::Factored(SymFactor::new(f * g.factor())),
            Covariance::KrylovFactors(k) => {
                let pushed = f * k.sqrt_factor();
                Covariance::Dense(linalg::symmetrized(&(&pushed * pushed.transpose())))
            }
            Covariance::Dirac => Covariance::Dirac,
        };
        Ok(Gaussian {
            mean,
            cov,
            sqrt_cache: OnceLock::new(),
        })
    }

    /// Conditions on the linear observation `L·X = value`: returns
    /// `N(x + Σ_xy·Σ_y†·(value − L·x), Σ − Σ_xy·Σ_y†·Σ_xyᵀ)` with
    /// `Σ_xy = Σ·Lᵀ` and `Σ_y = L·Σ·Lᵀ`, using the Moore-Penrose inverse of
    /// `Σ_y`. An observation with zero rows carries no information and
    /// returns the distribution unchanged.
    pub fn condition_on_linear(&self, l: &DMatrix<T>, value: &DVector<T>) -> Result<Gaussian<T>> {
        if l.ncols() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "observation map takes length-{} inputs, distribution has dimension {}",
                l.ncols(),
                self.dim()
            )));
        }
        if value.len() != l.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "observed value length {} does not match observation count {}",
                value.len(),
                l.nrows()
            )));
        }
        if l.nrows() == 0 {
            return Ok(self.clone());
        }
        let sigma = self.covariance_dense();
        let sigma_xy = &sigma * l.transpose();
        let sigma_y = linalg::symmetrized(&(l * &sigma_xy));
        let sigma_y_pinv = linalg::pseudo_inverse(&sigma_y, None)?;
        let gain = &sigma_xy * sigma_y_pinv;
        let innovation = value - l * &self.mean;
        let mean = &self.mean + &gain * innovation;
        let mut cov = sigma - gain * sigma_xy.transpose();
        linalg::symmetrize(&mut cov);
        Gaussian::new_dense(mean, cov)
    }
}

/// Expected squared `B`-weighted distance between independent draws from two
/// Gaussians: `‖x₁−x₂‖_B² + trace(B·Σ₁) + trace(B·Σ₂)`.
pub fn expected_sq_distance<T: Scalar>(
    g1: &Gaussian<T>,
    g2: &Gaussian<T>,
    b: &SpdMatrix<T>,
) -> Result<T> {
    if g1.dim() != g2.dim() {
        return Err(Error::DimensionMismatch(format!(
            "distributions have different dimensions {} and {}",
            g1.dim(),
            g2.dim()
        )));
    }
    let diff = g1.mean() - g2.mean();
    let mean_term = diff.dot(&b.mul_vec(&diff));
    Ok(mean_term + g1.cov_trace_with(b)? + g2.cov_trace_with(b)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn random_spd(n: usize, src: &mut RandomSource) -> DMatrix<f64> {
        let m = DMatrix::from_fn(n, n, |_, _| src.normal::<f64>());
        &m * m.transpose() + DMatrix::identity(n, n) * (0.5 * n as f64)
    }

    /// Builds an n×k matrix whose columns are orthonormal in the inner
    /// product of `a`: V = A^{-1/2}·Q with QᵀQ = I.
    fn a_orthonormal_columns(
        a_dense: &DMatrix<f64>,
        k: usize,
        src: &mut RandomSource,
    ) -> DMatrix<f64> {
        let n = a_dense.nrows();
        let root = linalg::sym_sqrt(a_dense).unwrap();
        let inv_root = linalg::pseudo_inverse(&root, None).unwrap();
        let q = DMatrix::from_fn(n, n, |_, _| src.normal::<f64>()).qr().q();
        &inv_root * q.columns(0, k).into_owned()
    }

    /// Identical (seed, stream) pairs reproduce identical samples.
    #[test]
    fn random_source_is_reproducible() {
        let g = Gaussian::<f64>::new_dense(DVector::zeros(4), DMatrix::identity(4, 4)).unwrap();
        let mut a = RandomSource::new(42, 7);
        let mut b = RandomSource::new(42, 7);
        for _ in 0..10 {
            assert_eq!(g.sample(&mut a).unwrap(), g.sample(&mut b).unwrap());
        }
        let mut c = RandomSource::new(42, 8);
        assert_ne!(
            g.sample(&mut RandomSource::new(42, 7)).unwrap(),
            g.sample(&mut c).unwrap(),
            "distinct streams must not collide"
        );
    }

    /// A point mass always samples to its mean.
    #[test]
    fn dirac_samples_to_mean() {
        let g = Gaussian::<f64>::dirac(DVector::from_vec(vec![1.0, 2.0]));
        let mut src = RandomSource::new(1, 0);
        for _ in 0..5 {
            assert_eq!(
                g.sample(&mut src).unwrap(),
                DVector::from_vec(vec![1.0, 2.0])
            );
        }
    }

    /// Empirical mean of standard-normal samples vanishes at Monte Carlo rate.
    #[test]
    fn standard_normal_empirical_mean() {
        let g = Gaussian::new_dense(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        let mut src = RandomSource::new(2024, 0);
        let n = 100_000;
        let mut acc = DVector::<f64>::zeros(2);
        for _ in 0..n {
            acc += g.sample(&mut src).unwrap();
        }
        acc /= n as f64;
        assert!(
            acc[0].abs() < 0.02 && acc[1].abs() < 0.02,
            "empirical mean too far from zero: {acc:?}"
        );
    }

    /// Kernel directions of the covariance receive exactly zero noise.
    #[test]
    fn kernel_direction_stays_exact() {
        let cov = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 0.0]));
        let g = Gaussian::new_dense(DVector::zeros(2), cov).unwrap();
        let mut src = RandomSource::new(7, 0);
        for _ in 0..100 {
            let s = g.sample(&mut src).unwrap();
            assert_eq!(s[1], 0.0, "kernel coordinate must stay exactly zero");
        }
    }

    /// Sampling a dense covariance that is genuinely indefinite fails.
    #[test]
    fn sampling_indefinite_covariance_errors() {
        let cov = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]));
        let g = Gaussian::new_dense(DVector::zeros(2), cov).unwrap();
        let mut src = RandomSource::new(7, 0);
        assert!(matches!(g.sample(&mut src), Err(Error::NotPsd(_))));
    }

    /// Identity pushforward leaves mean and covariance untouched.
    #[test]
    fn affine_push_identity() {
        let mut src = RandomSource::new(3, 0);
        let cov = random_spd(3, &mut src);
        let mean = src.normal_vector::<f64>(3);
        let g = Gaussian::new_dense(mean.clone(), cov.clone()).unwrap();
        let pushed = g
            .affine_push(&DMatrix::identity(3, 3), &DVector::zeros(3))
            .unwrap();
        assert!((pushed.mean() - mean).norm() < 1e-15);
        assert!((pushed.covariance_dense() - cov).norm() < 1e-12);
    }

    /// Pushing N(0, I) through a square root of A produces N(0, A).
    #[test]
    fn affine_push_builds_target_covariance() {
        let mut src = RandomSource::new(4, 0);
        let a = random_spd(4, &mut src);
        let root = linalg::sym_sqrt(&a).unwrap();
        let g = Gaussian::new_dense(DVector::zeros(4), DMatrix::identity(4, 4)).unwrap();
        let pushed = g.affine_push(&root, &DVector::zeros(4)).unwrap();
        assert!(
            (pushed.covariance_dense() - &a).norm() <= 1e-10 * (1.0 + a.norm()),
            "pushforward covariance does not match target"
        );
    }

    /// Permutation pushforward with an offset: N((1,0), I) ↦ N((1,2), I).
    #[test]
    fn affine_push_permutation_with_offset() {
        let g = Gaussian::new_dense(
            DVector::from_vec(vec![1.0, 0.0]),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let f = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let y = DVector::from_vec(vec![1.0, 1.0]);
        let pushed = g.affine_push(&f, &y).unwrap();
        assert!((pushed.mean() - DVector::from_vec(vec![1.0, 2.0])).norm() < 1e-15);
        assert!((pushed.covariance_dense() - DMatrix::identity(2, 2)).norm() < 1e-14);
    }

    /// Factored covariances stay factored under pushforward.
    #[test]
    fn affine_push_keeps_factored_form() {
        let factor = SymFactor::new(DMatrix::from_row_slice(3, 2, &[
            1.0, 0.0, //
            0.0, 2.0, //
            1.0, 1.0,
        ]));
        let g = Gaussian::from_factor(DVector::zeros(3), factor).unwrap();
        let f = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let pushed = g.affine_push(&f, &DVector::zeros(2)).unwrap();
        assert!(
            matches!(pushed.covariance(), Covariance::Factored(_)),
            "factored input must produce factored output"
        );
    }

    /// Conditioning on zero observations returns the distribution unchanged.
    #[test]
    fn conditioning_on_nothing_is_identity() {
        let mut src = RandomSource::new(5, 0);
        let cov = random_spd(3, &mut src);
        let g = Gaussian::new_dense(src.normal_vector::<f64>(3), cov).unwrap();
        let l = DMatrix::<f64>::zeros(0, 3);
        let cond = g.condition_on_linear(&l, &DVector::zeros(0)).unwrap();
        assert_eq!(cond.mean(), g.mean());
        assert!((cond.covariance_dense() - g.covariance_dense()).norm() < 1e-15);
    }

    /// Scalar conditioning: N(0, I₂) given first coordinate 3 → N((3,0), diag(0,1)).
    #[test]
    fn scalar_conditioning_closed_form() {
        let g = Gaussian::new_dense(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        let l = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let cond = g
            .condition_on_linear(&l, &DVector::from_vec(vec![3.0]))
            .unwrap();
        assert!((cond.mean() - DVector::from_vec(vec![3.0, 0.0])).norm() < 1e-12);
        let expected_cov = DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 1.0]));
        assert!((cond.covariance_dense() - expected_cov).norm() < 1e-12);
    }

    /// Quadratic-form mean for a point mass is the plain quadratic form.
    #[test]
    fn quadratic_form_mean_dirac() {
        let x = DVector::from_vec(vec![1.0, 2.0]);
        let g = Gaussian::dirac(x.clone());
        let b = SpdMatrix::from_dense(DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]))
            .unwrap();
        let expected = x.dot(&b.mul_vec(&x));
        assert_abs_diff_eq!(g.quadratic_form_mean(&b).unwrap(), expected, epsilon = 1e-14);
    }

    /// Standard Gaussian with identity weight has quadratic-form mean n.
    #[test]
    fn quadratic_form_mean_standard() {
        let n = 6;
        let g = Gaussian::new_dense(DVector::zeros(n), DMatrix::identity(n, n)).unwrap();
        let b = SpdMatrix::<f64>::identity(n);
        assert_abs_diff_eq!(g.quadratic_form_mean(&b).unwrap(), n as f64, epsilon = 1e-12);
    }

    /// Trace plus mean term: N((1,0), diag(2,3)) with identity weight → 6.
    #[test]
    fn quadratic_form_mean_hand_value() {
        let g = Gaussian::new_dense(
            DVector::from_vec(vec![1.0, 0.0]),
            DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0])),
        )
        .unwrap();
        let b = SpdMatrix::<f64>::identity(2);
        assert_abs_diff_eq!(g.quadratic_form_mean(&b).unwrap(), 6.0, epsilon = 1e-13);
    }

    /// Expected squared distance between identical point masses is zero.
    #[test]
    fn expected_sq_distance_identical_diracs() {
        let x = DVector::from_vec(vec![1.0, -1.0, 2.0]);
        let g = Gaussian::<f64>::dirac(x);
        let b = SpdMatrix::<f64>::identity(3);
        assert_eq!(expected_sq_distance(&g, &g.clone(), &b).unwrap(), 0.0);
    }

    /// Two standard Gaussians with identity weight: expected squared distance 2n.
    #[test]
    fn expected_sq_distance_two_standards() {
        let n = 5;
        let g = Gaussian::new_dense(DVector::zeros(n), DMatrix::identity(n, n)).unwrap();
        let b = SpdMatrix::<f64>::identity(n);
        assert_abs_diff_eq!(
            expected_sq_distance(&g, &g.clone(), &b).unwrap(),
            2.0 * n as f64,
            epsilon = 1e-12
        );
    }

    /// Monte Carlo check of the expected squared distance formula.
    #[test]
    fn expected_sq_distance_monte_carlo() {
        let mut src = RandomSource::new(99, 0);
        let n = 4;
        let g1 = Gaussian::new_dense(src.normal_vector::<f64>(n), random_spd(n, &mut src)).unwrap();
        let g2 = Gaussian::new_dense(src.normal_vector::<f64>(n), random_spd(n, &mut src)).unwrap();
        let b = SpdMatrix::from_dense(random_spd(n, &mut src)).unwrap();
        let analytic = expected_sq_distance(&g1, &g2, &b).unwrap();

        let trials = 100_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..trials {
            let m = g1.sample(&mut src).unwrap();
            let s = g2.sample(&mut src).unwrap();
            let d = &m - &s;
            let v = d.dot(&b.mul_vec(&d));
            sum += v;
            sum_sq += v * v;
        }
        let mc_mean = sum / trials as f64;
        let variance = (sum_sq / trials as f64 - mc_mean * mc_mean).max(0.0);
        let std_err = (variance / trials as f64).sqrt();
        assert!(
            (mc_mean - analytic).abs() <= 3.0 * std_err,
            "Monte Carlo mean {mc_mean} deviates from analytic {analytic} by more than 3 standard errors ({std_err})"
        );
    }

    /// Empirical covariance of pushed samples matches the analytic pushforward.
    #[test]
    fn stability_closure_empirical_covariance() {
        let mut src = RandomSource::new(123, 0);
        let cov = random_spd(3, &mut src);
        let mean = src.normal_vector::<f64>(3);
        let g = Gaussian::new_dense(mean, cov.clone()).unwrap();
        let f = DMatrix::from_row_slice(2, 3, &[1.0, 0.5, 0.0, -0.5, 1.0, 2.0]);
        let y = DVector::from_vec(vec![1.0, -2.0]);
        let pushed = g.affine_push(&f, &y).unwrap();
        let analytic = pushed.covariance_dense();

        let trials = 100_000;
        let mut acc_mean = DVector::<f64>::zeros(2);
        let mut acc_outer = DMatrix::<f64>::zeros(2, 2);
        for _ in 0..trials {
            let s = pushed.sample(&mut src).unwrap();
            acc_mean += &s;
            acc_outer += &s * s.transpose();
        }
        let emp_mean = acc_mean / trials as f64;
        let emp_cov = acc_outer / trials as f64 - &emp_mean * emp_mean.transpose();
        assert!(
            (emp_cov - &analytic).norm() <= 0.05 * analytic.norm(),
            "empirical covariance off by more than 5% Frobenius"
        );
    }

    /// Quadratic-form and distance expectations agree across representations.
    #[test]
    fn representation_equivalence() {
        let mut src = RandomSource::new(31, 0);
        let n = 6;
        let k = 3;
        let a_dense = random_spd(n, &mut src);
        let v = a_orthonormal_columns(&a_dense, k, &mut src);
        let phi = DVector::from_vec(vec![2.0, 0.7, 0.1]);
        let a = Arc::new(SpdMatrix::from_dense(a_dense).unwrap());

        let mean = src.normal_vector::<f64>(n);
        let krylov = Gaussian::from_krylov(
            mean.clone(),
            KrylovCov::new(v.clone(), phi.clone(), Arc::clone(&a)).unwrap(),
        )
        .unwrap();
        krylov.validate().unwrap();

        let mut sqrt_factor = v.clone();
        for j in 0..k {
            let s = phi[j].sqrt();
            for i in 0..n {
                sqrt_factor[(i, j)] *= s;
            }
        }
        let factored = Gaussian::from_factor(mean.clone(), SymFactor::new(sqrt_factor)).unwrap();
        let dense = Gaussian::new_dense(mean.clone(), krylov.covariance_dense()).unwrap();

        let b = SpdMatrix::from_dense(random_spd(n, &mut src)).unwrap();
        let other = Gaussian::new_dense(src.normal_vector::<f64>(n), random_spd(n, &mut src))
            .unwrap();

        let q_dense = dense.quadratic_form_mean(&b).unwrap();
        let q_fact = factored.quadratic_form_mean(&b).unwrap();
        let q_kry = krylov.quadratic_form_mean(&b).unwrap();
        let scale = 1.0 + q_dense.abs();
        assert!((q_dense - q_fact).abs() <= 1e-10 * scale);
        assert!((q_dense - q_kry).abs() <= 1e-10 * scale);

        let d_dense = expected_sq_distance(&dense, &other, &b).unwrap();
        let d_fact = expected_sq_distance(&factored, &other, &b).unwrap();
        let d_kry = expected_sq_distance(&krylov, &other, &b).unwrap();
        let dscale = 1.0 + d_dense.abs();
        assert!((d_dense - d_fact).abs() <= 1e-10 * dscale);
        assert!((d_dense - d_kry).abs() <= 1e-10 * dscale);
    }

    /// Materializing any representation to dense and wrapping it again
    /// preserves the covariance.
    #[test]
    fn materialization_round_trip() {
        let mut src = RandomSource::new(57, 0);
        let n = 5;
        let a_dense = random_spd(n, &mut src);
        let v = a_orthonormal_columns(&a_dense, 2, &mut src);
        let phi = DVector::from_vec(vec![1.5, 0.25]);
        let a = Arc::new(SpdMatrix::from_dense(a_dense).unwrap());
        let g = Gaussian::from_krylov(
            DVector::zeros(n),
            KrylovCov::new(v, phi, a).unwrap(),
        )
        .unwrap();
        let dense = g.covariance_dense();
        let round = Gaussian::new_dense(DVector::zeros(n), dense.clone())
            .unwrap()
            .covariance_dense();
        assert!((round - &dense).norm() <= 1e-10 * (1.0 + dense.norm()));
    }

    /// Squared norms of samples from N(0, P) with P a rank-p orthogonal
    /// projector have empirical mean p at Monte Carlo accuracy.
    #[test]
    fn projector_covariance_chi_square_mean() {
        let mut src = RandomSource::new(271, 0);
        let n = 20;
        let p_rank = 5;
        let q = DMatrix::from_fn(n, n, |_, _| src.normal::<f64>()).qr().q();
        let basis = q.columns(0, p_rank).into_owned();
        let projector = &basis * basis.transpose();
        let g = Gaussian::new_dense(DVector::zeros(n), projector).unwrap();

        let trials = 100_000;
        let mut acc = 0.0;
        for _ in 0..trials {
            let s = g.sample(&mut src).unwrap();
            acc += s.norm_squared();
        }
        let mean = acc / trials as f64;
        let bound = 3.0 * (2.0 * p_rank as f64 / trials as f64).sqrt();
        assert!(
            (mean - p_rank as f64).abs() <= bound,
            "squared-norm mean {mean} deviates from rank {p_rank} beyond {bound}"
        );
    }
}
