//! End-to-end calibration experiments: matrix ingestion and generation,
//! checkpointed Z/S sampling runs, and CSV/SVG report emission.
//!
//! The runner draws every test problem from the reference distribution
//! `N(0, A⁻¹)`, solves it with the configured solver at each checkpoint,
//! and reduces the resulting statistic samples to per-checkpoint tables,
//! histograms, and a convergence series for the first test problem.

use std::collections::BTreeMap;
use std::env;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ChiSquared, Continuous};

use crate::calibration::{
    self, CalibrationThresholds, SSampleSet, SamplingOptions, Verdict, ZSampleSet,
};
use crate::gaussian::{Gaussian, RandomSource};
use crate::linalg::{a_inner, SpdMatrix};
use crate::solvers::{self, PriorSpec, SolveTrace, SolverVariant, LANCZOS_DEFAULT_EPS};
use crate::{conv, Error, Result, Scalar};

/// Environment variable capping the rayon worker count for a run.
pub const THREADS_ENV_VAR: &str = "KRYLOV_CALIBRATE_THREADS";

/// Condition number used by the built-in generators when none is given.
pub const DEFAULT_CONDITION_NUMBER: f64 = 1e4;

/// Default checkpoint iterations.
pub const DEFAULT_CHECKPOINTS: [usize; 3] = [10, 100, 300];

/// Default number of test problems per checkpoint.
pub const DEFAULT_N_TEST: usize = 100;

/// Default master seed.
pub const DEFAULT_SEED: u64 = 42;

/// Random stream reserved for matrix generation.
pub const MATRIX_STREAM: u64 = 0;

/// Random stream handed to the sampling drivers (test problems occupy the
/// streams above it).
pub const EXPERIMENT_STREAM: u64 = 1;

/// Histograms never use fewer bins than this.
pub const HIST_MIN_BINS: usize = 10;

/// Histograms never use more bins than this.
pub const HIST_MAX_BINS: usize = 1000;

// ---------------------------------------------------------------------------
// Matrix sources
// ---------------------------------------------------------------------------

/// Where the system operator comes from: a MatrixMarket file or one of the
/// built-in seeded generators.
#[derive(Clone, Debug, PartialEq)]
pub enum MatrixSource {
    /// A MatrixMarket coordinate file; loaded operators are symmetrically
    /// scaled to unit diagonal before use.
    File(PathBuf),
    /// Diagonal matrix with eigenvalues log-spaced on `[1, kappa]`.
    DiagLogspace { n: usize, kappa: f64 },
    /// Dense rotation `Q·Λ·Qᵀ` of the same log-spaced spectrum, with `Q`
    /// drawn from a seeded QR factorization.
    RandSpd { n: usize, kappa: f64 },
}

impl MatrixSource {
    /// Parses a command-line matrix specification: either a file path or
    /// `gen:<name>:<order>[:<condition>]` with name `diag-logspace` or
    /// `rand-spd`.
    pub fn parse(spec: &str) -> Result<Self> {
        let Some(rest) = spec.strip_prefix("gen:") else {
            return Ok(MatrixSource::File(PathBuf::from(spec)));
        };
        let parts: Vec<&str> = rest.split(':').collect();
        if parts.len() < 2 || parts.len() > 3 {
            return Err(Error::Config(format!(
                "generator spec must be gen:<name>:<order>[:<condition>], got {spec:?}"
            )));
        }
        let n: usize = parts[1].parse().map_err(|_| {
            Error::Config(format!(
                "generator order must be a positive integer, got {:?}",
                parts[1]
            ))
        })?;
        let kappa: f64 = match parts.get(2) {
            Some(tok) => tok.parse().map_err(|_| {
                Error::Config(format!("generator condition number is not a number: {tok:?}"))
            })?,
            None => DEFAULT_CONDITION_NUMBER,
        };
        let source = match parts[0] {
            "diag-logspace" => MatrixSource::DiagLogspace { n, kappa },
            "rand-spd" => MatrixSource::RandSpd { n, kappa },
            other => {
                return Err(Error::Config(format!(
                    "unknown generator {other:?}; expected diag-logspace or rand-spd"
                )))
            }
        };
        source.validate()?;
        Ok(source)
    }

    /// Checks generator parameters; file paths are only checked on load.
    pub fn validate(&self) -> Result<()> {
        match *self {
            MatrixSource::File(_) => Ok(()),
            MatrixSource::DiagLogspace { n, kappa } | MatrixSource::RandSpd { n, kappa } => {
                if n == 0 {
                    return Err(Error::Config("generator order must be at least 1".into()));
                }
                if !kappa.is_finite() || kappa < 1.0 {
                    return Err(Error::Config(format!(
                        "generator condition number must be finite and at least 1, got {kappa}"
                    )));
                }
                Ok(())
            }
        }
    }

    /// Materializes the operator. File matrices are read and symmetrically
    /// scaled to unit diagonal; generated matrices are used as constructed.
    /// `seed` feeds the `rand-spd` rotation (stream [`MATRIX_STREAM`]).
    pub fn load<T: Scalar>(&self, seed: u64) -> Result<SpdMatrix<T>> {
        self.validate()?;
        match self {
            MatrixSource::File(path) => {
                let raw = read_matrix_market::<T>(path)?;
                jacobi_precondition(&raw)
            }
            MatrixSource::DiagLogspace { n, kappa } => Ok(diag_logspace(*n, *kappa)),
            MatrixSource::RandSpd { n, kappa } => rand_spd(*n, *kappa, seed),
        }
    }
}

fn logspace_eig(i: usize, n: usize, kappa: f64) -> f64 {
    if n <= 1 {
        1.0
    } else {
        kappa.powf(i as f64 / (n - 1) as f64)
    }
}

/// Diagonal SPD matrix with eigenvalues log-spaced on `[1, kappa]`.
pub fn diag_logspace<T: Scalar>(n: usize, kappa: f64) -> SpdMatrix<T> {
    let diag: Vec<T> = (0..n).map(|i| conv(logspace_eig(i, n, kappa))).collect();
    SpdMatrix::from_diagonal(&diag)
}

/// Dense SPD matrix `Q·Λ·Qᵀ` with `Λ` log-spaced on `[1, kappa]` and `Q`
/// the orthogonal factor of a seeded Gaussian matrix. Deterministic in
/// `seed`.
pub fn rand_spd<T: Scalar>(n: usize, kappa: f64, seed: u64) -> Result<SpdMatrix<T>> {
    let mut src = RandomSource::new(seed, MATRIX_STREAM);
    let g = DMatrix::<T>::from_iterator(
        n,
        n,
        std::iter::repeat_with(|| src.normal::<T>()).take(n * n),
    );
    let q = g.qr().q();
    let mut scaled = q.clone();
    for j in 0..n {
        let lam: T = conv(logspace_eig(j, n, kappa));
        scaled.column_mut(j).scale_mut(lam);
    }
    let a = &scaled * q.transpose();
    SpdMatrix::from_dense(a)
}

// ---------------------------------------------------------------------------
// MatrixMarket I/O
// ---------------------------------------------------------------------------

/// Scales a matrix with positive diagonal to unit diagonal:
/// `D^{-1/2}·B·D^{-1/2}` with `D = diag(B)`.
pub fn jacobi_precondition<T: Scalar>(b: &SpdMatrix<T>) -> Result<SpdMatrix<T>> {
    let d = b.diagonal();
    for (i, &di) in d.iter().enumerate() {
        if di <= T::zero() {
            return Err(Error::NotPsd(format!(
                "diagonal entry {i} is {di:e}; diagonal scaling requires a positive diagonal"
            )));
        }
    }
    let s = DVector::from_fn(b.order(), |i, _| T::one() / d[i].sqrt());
    b.diag_congruence(&s)
}

fn parse_mm_header(line: &str, lineno: usize) -> Result<bool> {
    let bad = |msg: &str| Error::Parse {
        line: lineno,
        msg: format!(
            "malformed header ({msg}); expected \
             '%%MatrixMarket matrix coordinate real symmetric'"
        ),
    };
    let tokens: Vec<&str> = line.split_whitespace().collect();
    if tokens.len() != 5 || !tokens[0].eq_ignore_ascii_case("%%matrixmarket") {
        return Err(bad("not a MatrixMarket banner"));
    }
    if !tokens[1].eq_ignore_ascii_case("matrix") {
        return Err(bad("only the matrix object is supported"));
    }
    if !tokens[2].eq_ignore_ascii_case("coordinate") {
        return Err(bad("only coordinate storage is supported"));
    }
    if !tokens[3].eq_ignore_ascii_case("real") && !tokens[3].eq_ignore_ascii_case("integer") {
        return Err(bad("only real-valued matrices are supported"));
    }
    if tokens[4].eq_ignore_ascii_case("symmetric") {
        Ok(true)
    } else if tokens[4].eq_ignore_ascii_case("general") {
        Ok(false)
    } else {
        Err(bad("only symmetric or general storage is supported"))
    }
}

fn parse_mm_value(tok: &str, lineno: usize) -> Result<f64> {
    let normalized: String = if tok.contains(['D', 'd']) {
        tok.replace(['D', 'd'], "e")
    } else {
        tok.to_string()
    };
    normalized.parse().map_err(|_| Error::Parse {
        line: lineno,
        msg: format!("cannot parse value {tok:?}"),
    })
}

/// Reads a symmetric matrix from a MatrixMarket coordinate file.
///
/// Files flagged `symmetric` store one triangle, which is mirrored. Files
/// flagged `general` must contain explicitly symmetric storage — every
/// off-diagonal entry needs an exactly matching transpose partner.
pub fn read_matrix_market<T: Scalar>(path: &Path) -> Result<SpdMatrix<T>> {
    let reader = BufReader::new(fs::File::open(path)?);

    enum State {
        Header,
        Size,
        Data,
    }
    let mut state = State::Header;
    let mut symmetric = false;
    let mut n = 0usize;
    let mut declared = 0usize;
    let mut entries: Vec<(usize, usize, f64)> = Vec::new();
    let mut lineno = 0usize;

    for line in reader.lines() {
        lineno += 1;
        let line = line?;
        let trimmed = line.trim();
        match state {
            State::Header => {
                symmetric = parse_mm_header(trimmed, lineno)?;
                state = State::Size;
            }
            State::Size => {
                if trimmed.is_empty() || trimmed.starts_with('%') {
                    continue;
                }
                let tokens: Vec<&str> = trimmed.split_whitespace().collect();
                if tokens.len() != 3 {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: format!("size line must be 'rows cols nnz', got {trimmed:?}"),
                    });
                }
                let dims: Vec<usize> = tokens
                    .iter()
                    .map(|t| {
                        t.parse::<usize>().map_err(|_| Error::Parse {
                            line: lineno,
                            msg: format!("cannot parse size field {t:?}"),
                        })
                    })
                    .collect::<Result<_>>()?;
                if dims[0] != dims[1] {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: format!("matrix is not square: {} x {}", dims[0], dims[1]),
                    });
                }
                n = dims[0];
                declared = dims[2];
                entries.reserve(declared);
                state = State::Data;
            }
            State::Data => {
                if trimmed.is_empty() || trimmed.starts_with('%') {
                    continue;
                }
                if entries.len() == declared {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: format!("unexpected data after the declared {declared} entries"),
                    });
                }
                let tokens: Vec<&str> = trimmed.split_whitespace().collect();
                if tokens.len() != 3 {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: format!("entry must be 'row col value', got {trimmed:?}"),
                    });
                }
                let parse_index = |t: &str| -> Result<usize> {
                    t.parse::<usize>().map_err(|_| Error::Parse {
                        line: lineno,
                        msg: format!("cannot parse index {t:?}"),
                    })
                };
                let i = parse_index(tokens[0])?;
                let j = parse_index(tokens[1])?;
                let v = parse_mm_value(tokens[2], lineno)?;
                if i < 1 || i > n || j < 1 || j > n {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: format!("index out of range: ({i}, {j}) in an order-{n} matrix"),
                    });
                }
                entries.push((i, j, v));
            }
        }
    }

    match state {
        State::Header => {
            return Err(Error::Parse {
                line: 1,
                msg: "missing MatrixMarket header".into(),
            })
        }
        State::Size => {
            return Err(Error::Parse {
                line: lineno,
                msg: "missing size line".into(),
            })
        }
        State::Data if entries.len() < declared => {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected {declared} entries, found {}", entries.len()),
            });
        }
        State::Data => {}
    }

    let stored: Vec<(usize, usize, T)> = if symmetric {
        entries
            .iter()
            .map(|&(i, j, v)| (i - 1, j - 1, conv::<T>(v)))
            .collect()
    } else {
        // General storage: demand an exact transpose partner for every
        // off-diagonal entry, then keep one triangle.
        let mut map: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for &(i, j, v) in &entries {
            *map.entry((i, j)).or_insert(0.0) += v;
        }
        for (&(i, j), &v) in &map {
            if i < j && map.get(&(j, i)) != Some(&v) {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!(
                        "entry ({i}, {j}) has no matching ({j}, {i}): \
                         non-symmetric storage without the symmetric flag"
                    ),
                });
            }
        }
        map.iter()
            .filter(|&(&(i, j), _)| i >= j)
            .map(|(&(i, j), &v)| (i - 1, j - 1, conv::<T>(v)))
            .collect()
    };
    SpdMatrix::from_coo(n, &stored)
}

/// Writes the lower triangle of a symmetric matrix as a MatrixMarket
/// coordinate file. Values are written in shortest round-trip scientific
/// notation, so a write/read cycle reproduces the matrix exactly.
pub fn write_matrix_market<T: Scalar>(path: &Path, matrix: &SpdMatrix<T>) -> Result<()> {
    let dense = matrix.to_dense();
    let n = matrix.order();
    let mut lines: Vec<(usize, usize, T)> = Vec::new();
    for j in 0..n {
        for i in j..n {
            if dense[(i, j)] != T::zero() {
                lines.push((i + 1, j + 1, dense[(i, j)]));
            }
        }
    }
    let mut out = String::from("%%MatrixMarket matrix coordinate real symmetric\n");
    out.push_str(&format!("{n} {n} {}\n", lines.len()));
    for (i, j, v) in lines {
        out.push_str(&format!("{i} {j} {v:e}\n"));
    }
    fs::write(path, out.as_bytes())?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Configuration and report types
// ---------------------------------------------------------------------------

/// Parses a solver name from the command line. `approx_rank` is consumed
/// only by the truncated-posterior variant.
pub fn parse_solver(name: &str, approx_rank: usize) -> Result<SolverVariant> {
    match name {
        "random-directions" => Ok(SolverVariant::RandomDirections),
        "inverse-prior" => Ok(SolverVariant::InversePrior),
        "krylov-full" => Ok(SolverVariant::KrylovFull),
        "krylov-approx" => {
            if approx_rank == 0 {
                Err(Error::Config(
                    "approximation rank must be at least 1".into(),
                ))
            } else {
                Ok(SolverVariant::KrylovApprox { rank: approx_rank })
            }
        }
        other => Err(Error::Config(format!(
            "unknown solver variant {other:?}; expected one of random-directions, \
             inverse-prior, krylov-full, krylov-approx"
        ))),
    }
}

/// Full description of a calibration run.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub matrix: MatrixSource,
    pub solver: SolverVariant,
    /// Iteration counts at which the posterior is scored, strictly
    /// ascending. May be empty, producing header-only tables.
    pub checkpoints: Vec<usize>,
    pub n_test: usize,
    pub seed: u64,
    /// Breakdown tolerance for the full-posterior basis construction.
    pub lanczos_eps: f64,
    pub out_dir: PathBuf,
    pub svg: bool,
}

impl ExperimentConfig {
    /// A configuration with the default checkpoints `[10, 100, 300]`,
    /// 100 test problems, seed 42, and no SVG output.
    pub fn new(matrix: MatrixSource, solver: SolverVariant, out_dir: PathBuf) -> Self {
        ExperimentConfig {
            matrix,
            solver,
            checkpoints: DEFAULT_CHECKPOINTS.to_vec(),
            n_test: DEFAULT_N_TEST,
            seed: DEFAULT_SEED,
            lanczos_eps: LANCZOS_DEFAULT_EPS,
            out_dir,
            svg: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.matrix.validate()?;
        for w in self.checkpoints.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::Config(format!(
                    "checkpoints must be strictly ascending, got {} before {}",
                    w[0], w[1]
                )));
            }
        }
        if self.n_test == 0 {
            return Err(Error::Config("n_test must be at least 1".into()));
        }
        if !self.lanczos_eps.is_finite() || self.lanczos_eps <= 0.0 {
            return Err(Error::Config(format!(
                "basis breakdown tolerance must be positive and finite, got {}",
                self.lanczos_eps
            )));
        }
        if let SolverVariant::KrylovApprox { rank } = self.solver {
            if rank == 0 {
                return Err(Error::Config(
                    "approximation rank must be at least 1".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Scored statistics of one checkpoint.
#[derive(Clone, Debug)]
pub struct CheckpointRow<T: Scalar> {
    pub m: usize,
    pub z: ZSampleSet<T>,
    pub s: SSampleSet<T>,
    pub z_verdict: Verdict<T>,
    pub s_verdict: Verdict<T>,
}

/// Everything a run produces, ready for report emission.
#[derive(Clone, Debug)]
pub struct ExperimentReport<T: Scalar> {
    pub matrix_order: usize,
    /// One row per configured checkpoint, in checkpoint order.
    pub rows: Vec<CheckpointRow<T>>,
    /// `(iteration, ‖x*−xᵢ‖²_A / ‖x*−x₀‖²_A)` for test problem 0 run to the
    /// largest checkpoint; empty when there are no checkpoints or problem 0
    /// breaks down.
    pub convergence: Vec<(usize, T)>,
    pub wall_clock: Duration,
}

impl<T: Scalar> ExperimentReport<T> {
    /// Every reported number must be finite.
    fn ensure_finite(&self) -> Result<()> {
        let check = |value: T, what: &str, m: usize| -> Result<()> {
            if value.is_finite() {
                Ok(())
            } else {
                Err(Error::Breakdown(format!(
                    "non-finite {what} at checkpoint m = {m}"
                )))
            }
        };
        for row in &self.rows {
            for &z in row.z.samples() {
                check(z, "Z sample", row.m)?;
            }
            check(row.z.mean(), "Z mean", row.m)?;
            check(row.z.ks(), "KS value", row.m)?;
            for &s in row.s.s_samples() {
                check(s, "S sample", row.m)?;
            }
            for &t in row.s.traces() {
                check(t, "trace sample", row.m)?;
            }
            check(row.s.h(), "S mean", row.m)?;
            check(row.s.trace_mean(), "trace mean", row.m)?;
            check(row.s.trace_std(), "trace std", row.m)?;
            check(row.z_verdict.evidence, "Z evidence", row.m)?;
            check(row.s_verdict.evidence, "S evidence", row.m)?;
        }
        for &(i, e) in &self.convergence {
            if !e.is_finite() {
                return Err(Error::Breakdown(format!(
                    "non-finite relative error at iteration {i}"
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// The runner
// ---------------------------------------------------------------------------

fn parse_thread_cap(raw: &str) -> Result<usize> {
    let cap: usize = raw.trim().parse().map_err(|_| {
        Error::Config(format!(
            "{THREADS_ENV_VAR} must be a positive integer, got {raw:?}"
        ))
    })?;
    if cap == 0 {
        return Err(Error::Config(format!(
            "{THREADS_ENV_VAR} must be a positive integer, got \"0\""
        )));
    }
    Ok(cap)
}

fn thread_cap_from_env() -> Result<Option<usize>> {
    match env::var(THREADS_ENV_VAR) {
        Ok(raw) => parse_thread_cap(&raw).map(Some),
        Err(env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(Error::Config(format!("{THREADS_ENV_VAR}: {e}"))),
    }
}

/// Runs the configured experiment: at every checkpoint `m`, draws `n_test`
/// problems from `N(0, A⁻¹)`, solves each to iteration `m`, and scores both
/// statistics on the shared solves. All checkpoints see the same test
/// problems. The worker count honors [`THREADS_ENV_VAR`].
pub fn run_experiment<T: Scalar + Send + Sync>(cfg: &ExperimentConfig) -> Result<ExperimentReport<T>> {
    cfg.validate()?;
    let start = Instant::now();
    let a = Arc::new(cfg.matrix.load::<T>(cfg.seed)?);
    let n = a.order();
    let prior = PriorSpec::inverse_of_a(DVector::zeros(n));
    let reference = prior.to_gaussian(&a)?;
    let master = RandomSource::new(cfg.seed, EXPERIMENT_STREAM);
    let options = SamplingOptions {
        lanczos_eps: conv(cfg.lanczos_eps),
    };
    let thresholds = CalibrationThresholds::default();

    let body = || -> Result<(Vec<CheckpointRow<T>>, Vec<(usize, T)>)> {
        let mut rows = Vec::with_capacity(cfg.checkpoints.len());
        for &m in &cfg.checkpoints {
            let (z, s) = calibration::sample_z_and_s(
                &a, &prior, &reference, cfg.solver, m, cfg.n_test, &master, &options,
            )?;
            let z_verdict = calibration::verdict_from_z(&z, &thresholds);
            let s_verdict = calibration::verdict_from_s(&s, &thresholds);
            rows.push(CheckpointRow {
                m,
                z,
                s,
                z_verdict,
                s_verdict,
            });
        }
        let convergence = convergence_series(&a, &prior, &reference, cfg, &master)?;
        Ok((rows, convergence))
    };

    let (rows, convergence) = match thread_cap_from_env()? {
        Some(cap) => rayon::ThreadPoolBuilder::new()
            .num_threads(cap)
            .build()
            .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?
            .install(body)?,
        None => body()?,
    };

    let report = ExperimentReport {
        matrix_order: n,
        rows,
        convergence,
        wall_clock: start.elapsed(),
    };
    report.ensure_finite()?;
    Ok(report)
}

/// Re-runs test problem 0 at the largest checkpoint and records the relative
/// squared A-norm error of every mean iterate. Uses the same stream layout
/// as the sampling drivers, so this replays the sampled problem exactly.
fn convergence_series<T: Scalar>(
    a: &Arc<SpdMatrix<T>>,
    prior: &PriorSpec<T>,
    reference: &Gaussian<T>,
    cfg: &ExperimentConfig,
    master: &RandomSource,
) -> Result<Vec<(usize, T)>> {
    let Some(&m_max) = cfg.checkpoints.last() else {
        return Ok(Vec::new());
    };
    let mut draw = master.fork(master.stream() + 1);
    let x_star = reference.sample(&mut draw)?;
    let b = a.mul_vec(&x_star);
    let trace = match replay_trace(a, prior, &b, m_max, cfg, master) {
        Ok(t) => t,
        Err(e) if calibration::is_recoverable(&e) => return Ok(Vec::new()),
        Err(e) => return Err(e),
    };
    let e0 = &x_star - &prior.mean;
    let denom = a_inner(a.as_ref(), &e0, &e0)?;
    if denom <= T::zero() {
        return Ok(Vec::new());
    }
    let mut series = Vec::with_capacity(trace.iterates.len());
    for (i, x_i) in trace.iterates.iter().enumerate() {
        let e = &x_star - x_i;
        series.push((i, a_inner(a.as_ref(), &e, &e)? / denom));
    }
    Ok(series)
}

fn replay_trace<T: Scalar>(
    a: &Arc<SpdMatrix<T>>,
    prior: &PriorSpec<T>,
    b: &DVector<T>,
    m: usize,
    cfg: &ExperimentConfig,
    master: &RandomSource,
) -> Result<SolveTrace<T>> {
    match cfg.solver {
        SolverVariant::RandomDirections => {
            let mut src = master.fork(master.stream());
            Ok(solvers::bayescg_random_directions(a.as_ref(), b, prior, m, &mut src)?.1)
        }
        SolverVariant::InversePrior => {
            let f0 = solvers::inverse_prior_factor(a.as_ref())?;
            Ok(solvers::bayescg_factored(a.as_ref(), b, &prior.mean, &f0, m)?.trace)
        }
        SolverVariant::KrylovFull => {
            Ok(solvers::krylov_full(a, b, &prior.mean, m, conv(cfg.lanczos_eps))?.1)
        }
        SolverVariant::KrylovApprox { rank } => {
            Ok(solvers::krylov_approx(a, b, &prior.mean, m, rank)?.1)
        }
    }
}

// ---------------------------------------------------------------------------
// Histograms
// ---------------------------------------------------------------------------

/// A uniform binning grid. Bin widths follow the Freedman–Diaconis rule
/// computed from a designated spread sample, clamped to
/// `[HIST_MIN_BINS, HIST_MAX_BINS]` bins.
#[derive(Clone, Debug)]
pub struct HistogramGrid<T: Scalar> {
    lo: T,
    hi: T,
    bins: usize,
}

impl<T: Scalar> HistogramGrid<T> {
    /// Builds a grid covering `[lo, hi]` with the bin width suggested by
    /// the spread of `spread_samples`. Degenerate ranges are widened by
    /// half a unit on each side.
    pub fn from_samples(spread_samples: &[T], lo: T, hi: T) -> Self {
        let half = conv::<T>(0.5);
        let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - half, lo + half) };
        let mut sorted = spread_samples.to_vec();
        sorted.sort_by(|x, y| x.partial_cmp(y).expect("finite samples"));
        let bins = if sorted.is_empty() {
            HIST_MIN_BINS
        } else {
            let q = |frac: f64| -> T {
                let idx = ((sorted.len() - 1) as f64 * frac).round() as usize;
                sorted[idx]
            };
            let iqr = q(0.75) - q(0.25);
            let width = conv::<T>(2.0) * iqr
                / conv::<T>((sorted.len() as f64).powf(1.0 / 3.0));
            if width > T::zero() {
                ((hi - lo) / width)
                    .ceil()
                    .to_usize()
                    .unwrap_or(HIST_MAX_BINS)
                    .clamp(HIST_MIN_BINS, HIST_MAX_BINS)
            } else {
                HIST_MIN_BINS
            }
        };
        HistogramGrid { lo, hi, bins }
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn width(&self) -> T {
        (self.hi - self.lo) / conv::<T>(self.bins as f64)
    }

    /// Bin edges, `bins + 1` of them.
    pub fn edges(&self) -> Vec<T> {
        let w = self.width();
        (0..=self.bins)
            .map(|i| self.lo + w * conv::<T>(i as f64))
            .collect()
    }

    /// Midpoints of every bin.
    pub fn midpoints(&self) -> Vec<T> {
        let w = self.width();
        (0..self.bins)
            .map(|i| self.lo + w * conv::<T>(i as f64 + 0.5))
            .collect()
    }

    /// Counts samples per bin; values outside the range land in the
    /// nearest end bin, so the counts always sum to `samples.len()`.
    pub fn count(&self, samples: &[T]) -> Vec<usize> {
        let mut counts = vec![0usize; self.bins];
        let w = self.width();
        for &x in samples {
            let t = (x - self.lo) / w;
            let idx = if t <= T::zero() {
                0
            } else {
                t.floor().to_usize().unwrap_or(0).min(self.bins - 1)
            };
            counts[idx] += 1;
        }
        counts
    }
}

fn chi2_density(dof: usize, x: f64) -> Result<f64> {
    let dist = ChiSquared::new(dof.max(1) as f64)
        .map_err(|e| Error::Config(format!("chi-squared density: {e}")))?;
    Ok(dist.pdf(x))
}

// ---------------------------------------------------------------------------
// Report emission
// ---------------------------------------------------------------------------

fn sci<T: Scalar>(x: T) -> String {
    format!("{x:.5e}")
}

fn to_f64<T: Scalar>(x: T) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

fn write_text(path: PathBuf, content: &str) -> Result<PathBuf> {
    fs::write(&path, content.as_bytes())?;
    Ok(path)
}

fn z_histogram_csv<T: Scalar>(row: &CheckpointRow<T>) -> Result<(String, HistogramGrid<T>, Vec<usize>, Vec<f64>)> {
    let samples = row.z.samples();
    let lo = samples.iter().copied().fold(samples[0], T::min);
    let hi = samples.iter().copied().fold(samples[0], T::max);
    let grid = HistogramGrid::from_samples(samples, lo, hi);
    let counts = grid.count(samples);
    let edges = grid.edges();
    let mut density = Vec::with_capacity(grid.bins());
    for mid in grid.midpoints() {
        density.push(chi2_density(row.z.dof(), to_f64(mid))?);
    }
    let mut csv = String::from("bin_lo,bin_hi,z_count,chi2_density\n");
    for i in 0..grid.bins() {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            sci(edges[i]),
            sci(edges[i + 1]),
            counts[i],
            format_args!("{:.5e}", density[i]),
        ));
    }
    Ok((csv, grid, counts, density))
}

fn s_histogram_csv<T: Scalar>(row: &CheckpointRow<T>) -> (String, HistogramGrid<T>, Vec<usize>, Vec<usize>) {
    let s = row.s.s_samples();
    let t = row.s.traces();
    let lo = s.iter().chain(t.iter()).copied().fold(s[0], T::min);
    let hi = s.iter().chain(t.iter()).copied().fold(s[0], T::max);
    let grid = HistogramGrid::from_samples(s, lo, hi);
    let s_counts = grid.count(s);
    let t_counts = grid.count(t);
    let edges = grid.edges();
    let mut csv = String::from("bin_lo,bin_hi,s_count,trace_count\n");
    for i in 0..grid.bins() {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            sci(edges[i]),
            sci(edges[i + 1]),
            s_counts[i],
            t_counts[i],
        ));
    }
    (csv, grid, s_counts, t_counts)
}

/// Writes every report file into `dir` (created if missing) and returns the
/// paths written. Output is deterministic for a fixed report.
///
/// Files: `z_table.csv` and `s_table.csv` (one row per checkpoint),
/// `verdicts.csv`, per-checkpoint `hist_z_m{m}.csv` / `hist_s_m{m}.csv`,
/// `convergence.csv`, and with `svg` the matching histogram and convergence
/// plots.
pub fn write_report<T: Scalar>(
    report: &ExperimentReport<T>,
    dir: &Path,
    svg: bool,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    let mut z_csv = String::from("iteration,z_mean,chi2_mean,ks\n");
    for row in &report.rows {
        z_csv.push_str(&format!(
            "{},{},{},{}\n",
            row.m,
            sci(row.z.mean()),
            sci(row.z.chi2_mean()),
            sci(row.z.ks()),
        ));
    }
    written.push(write_text(dir.join("z_table.csv"), &z_csv)?);

    let mut s_csv = String::from("iteration,s_mean,trace_mean,trace_std\n");
    for row in &report.rows {
        s_csv.push_str(&format!(
            "{},{},{},{}\n",
            row.m,
            sci(row.s.h()),
            sci(row.s.trace_mean()),
            sci(row.s.trace_std()),
        ));
    }
    written.push(write_text(dir.join("s_table.csv"), &s_csv)?);

    let mut v_csv =
        String::from("iteration,z_verdict,z_evidence,s_verdict,s_evidence,dof,skipped\n");
    for row in &report.rows {
        v_csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            row.m,
            row.z_verdict.class,
            sci(row.z_verdict.evidence),
            row.s_verdict.class,
            sci(row.s_verdict.evidence),
            row.z.dof(),
            row.z.skipped(),
        ));
    }
    written.push(write_text(dir.join("verdicts.csv"), &v_csv)?);

    for row in &report.rows {
        let (hz_csv, z_grid, z_counts, density) = z_histogram_csv(row)?;
        written.push(write_text(dir.join(format!("hist_z_m{}.csv", row.m)), &hz_csv)?);
        let (hs_csv, s_grid, s_counts, t_counts) = s_histogram_csv(row);
        written.push(write_text(dir.join(format!("hist_s_m{}.csv", row.m)), &hs_csv)?);
        if svg {
            let n = row.z.len();
            let z_svg = svg_histogram(
                &format!("Z statistic at m = {}", row.m),
                &z_grid,
                ("Z samples", &z_counts),
                None,
                Some(&density),
                n,
            );
            written.push(write_text(dir.join(format!("hist_z_m{}.svg", row.m)), &z_svg)?);
            let s_svg = svg_histogram(
                &format!("S statistic at m = {}", row.m),
                &s_grid,
                ("S samples", &s_counts),
                Some(("trace estimates", &t_counts)),
                None,
                row.s.len(),
            );
            written.push(write_text(dir.join(format!("hist_s_m{}.svg", row.m)), &s_svg)?);
        }
    }

    let mut c_csv = String::from("iteration,relative_error\n");
    for &(i, e) in &report.convergence {
        c_csv.push_str(&format!("{},{}\n", i, sci(e)));
    }
    written.push(write_text(dir.join("convergence.csv"), &c_csv)?);
    if svg && !report.convergence.is_empty() {
        let c_svg = svg_convergence(&report.convergence);
        written.push(write_text(dir.join("convergence.svg"), &c_svg)?);
    }

    Ok(written)
}

// ---------------------------------------------------------------------------
// SVG rendering
// ---------------------------------------------------------------------------

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 400.0;
const SVG_ML: f64 = 56.0;
const SVG_MR: f64 = 12.0;
const SVG_MT: f64 = 30.0;
const SVG_MB: f64 = 42.0;

fn svg_open(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{SVG_H}\" \
         viewBox=\"0 0 {SVG_W} {SVG_H}\">\n\
         <rect width=\"{SVG_W}\" height=\"{SVG_H}\" fill=\"white\"/>\n\
         <text x=\"{:.1}\" y=\"18\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"13\">{title}</text>\n",
        SVG_W / 2.0
    )
}

fn svg_axes(x0: f64, x1: f64, y_top_label: &str) -> String {
    format!(
        "<line x1=\"{l:.1}\" y1=\"{b:.1}\" x2=\"{r:.1}\" y2=\"{b:.1}\" stroke=\"black\"/>\n\
         <line x1=\"{l:.1}\" y1=\"{t:.1}\" x2=\"{l:.1}\" y2=\"{b:.1}\" stroke=\"black\"/>\n\
         <text x=\"{l:.1}\" y=\"{lb:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"11\">{x0:.3e}</text>\n\
         <text x=\"{r:.1}\" y=\"{lb:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"11\">{x1:.3e}</text>\n\
         <text x=\"{l:.1}\" y=\"{tt:.1}\" text-anchor=\"end\" font-family=\"sans-serif\" \
         font-size=\"11\">{y_top_label}</text>\n",
        l = SVG_ML,
        r = SVG_W - SVG_MR,
        t = SVG_MT,
        b = SVG_H - SVG_MB,
        lb = SVG_H - SVG_MB + 16.0,
        tt = SVG_MT - 6.0,
    )
}

/// Renders bar series (as empirical densities) and an optional reference
/// density polyline over a shared grid.
fn svg_histogram<T: Scalar>(
    title: &str,
    grid: &HistogramGrid<T>,
    primary: (&str, &[usize]),
    secondary: Option<(&str, &[usize])>,
    density: Option<&[f64]>,
    n_samples: usize,
) -> String {
    let edges: Vec<f64> = grid.edges().iter().map(|&e| to_f64(e)).collect();
    let width = to_f64(grid.width());
    let x0 = edges[0];
    let x1 = edges[edges.len() - 1];
    let scale = (n_samples.max(1) as f64) * width;
    let bar_density = |counts: &[usize], i: usize| counts[i] as f64 / scale;

    let mut y_max = 0.0f64;
    for i in 0..grid.bins() {
        y_max = y_max.max(bar_density(primary.1, i));
        if let Some((_, counts)) = secondary {
            y_max = y_max.max(bar_density(counts, i));
        }
    }
    if let Some(d) = density {
        for &v in d {
            if v.is_finite() {
                y_max = y_max.max(v);
            }
        }
    }
    if y_max <= 0.0 {
        y_max = 1.0;
    }
    y_max *= 1.05;

    let px = |x: f64| SVG_ML + (x - x0) / (x1 - x0) * (SVG_W - SVG_ML - SVG_MR);
    let py = |y: f64| SVG_H - SVG_MB - y / y_max * (SVG_H - SVG_MT - SVG_MB);

    let mut out = svg_open(title);
    out.push_str(&svg_axes(x0, x1, &format!("{y_max:.3e}")));

    let bars = |counts: &[usize], color: &str, out: &mut String| {
        for i in 0..grid.bins() {
            let d = bar_density(counts, i);
            if d <= 0.0 {
                continue;
            }
            let x = px(edges[i]);
            let w = px(edges[i + 1]) - x;
            let y = py(d);
            out.push_str(&format!(
                "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{w:.2}\" height=\"{h:.2}\" \
                 fill=\"{color}\" fill-opacity=\"0.6\"/>\n",
                h = py(0.0) - y,
            ));
        }
    };
    bars(primary.1, "#4470a0", &mut out);
    if let Some((_, counts)) = secondary {
        bars(counts, "#c0504d", &mut out);
    }

    if let Some(d) = density {
        let mids: Vec<f64> = grid.midpoints().iter().map(|&m| to_f64(m)).collect();
        let pts: Vec<String> = mids
            .iter()
            .zip(d.iter())
            .filter(|(_, v)| v.is_finite())
            .map(|(&x, &v)| format!("{:.2},{:.2}", px(x), py(v.min(y_max))))
            .collect();
        if pts.len() > 1 {
            out.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"#202020\" stroke-width=\"1.5\"/>\n",
                pts.join(" ")
            ));
        }
    }

    let mut legend_y = SVG_MT + 14.0;
    let mut legend = |label: &str, color: &str, out: &mut String| {
        out.push_str(&format!(
            "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"10\" height=\"10\" fill=\"{color}\" \
             fill-opacity=\"0.6\"/>\n\
             <text x=\"{tx:.1}\" y=\"{ty:.1}\" font-family=\"sans-serif\" font-size=\"11\">\
             {label}</text>\n",
            x = SVG_ML + 8.0,
            y = legend_y,
            tx = SVG_ML + 22.0,
            ty = legend_y + 9.0,
        ));
        legend_y += 14.0;
    };
    legend(primary.0, "#4470a0", &mut out);
    if let Some((label, _)) = secondary {
        legend(label, "#c0504d", &mut out);
    }

    out.push_str("</svg>\n");
    out
}

/// Renders the convergence series on a log10 vertical scale.
fn svg_convergence<T: Scalar>(series: &[(usize, T)]) -> String {
    let floor = 1e-16f64;
    let logs: Vec<(f64, f64)> = series
        .iter()
        .map(|&(i, e)| (i as f64, to_f64(e).max(floor).log10()))
        .collect();
    let x1 = logs.last().map(|&(x, _)| x).unwrap_or(1.0).max(1.0);
    let y_hi = logs.iter().map(|&(_, y)| y).fold(f64::MIN, f64::max).max(0.0);
    let y_lo = logs.iter().map(|&(_, y)| y).fold(f64::MAX, f64::min).min(y_hi - 1.0);

    let px = |x: f64| SVG_ML + x / x1 * (SVG_W - SVG_ML - SVG_MR);
    let py = |y: f64| SVG_MT + (y_hi - y) / (y_hi - y_lo) * (SVG_H - SVG_MT - SVG_MB);

    let mut out = svg_open("Relative squared A-norm error of the posterior mean");
    out.push_str(&format!(
        "<line x1=\"{l:.1}\" y1=\"{b:.1}\" x2=\"{r:.1}\" y2=\"{b:.1}\" stroke=\"black\"/>\n\
         <line x1=\"{l:.1}\" y1=\"{t:.1}\" x2=\"{l:.1}\" y2=\"{b:.1}\" stroke=\"black\"/>\n\
         <text x=\"{l:.1}\" y=\"{lb:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"11\">0</text>\n\
         <text x=\"{r:.1}\" y=\"{lb:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"11\">{x1:.0}</text>\n\
         <text x=\"{l:.1}\" y=\"{tt:.1}\" text-anchor=\"end\" font-family=\"sans-serif\" \
         font-size=\"11\">1e{y_hi:.0}</text>\n\
         <text x=\"{l:.1}\" y=\"{bb:.1}\" text-anchor=\"end\" font-family=\"sans-serif\" \
         font-size=\"11\">1e{y_lo:.0}</text>\n",
        l = SVG_ML,
        r = SVG_W - SVG_MR,
        t = SVG_MT,
        b = SVG_H - SVG_MB,
        lb = SVG_H - SVG_MB + 16.0,
        tt = SVG_MT - 6.0,
        bb = SVG_H - SVG_MB,
    ));
    let pts: Vec<String> = logs
        .iter()
        .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
        .collect();
    if pts.len() > 1 {
        out.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"#4470a0\" stroke-width=\"1.5\"/>\n",
            pts.join(" ")
        ));
    }
    out.push_str("</svg>\n");
    out
}

// ---------------------------------------------------------------------------
