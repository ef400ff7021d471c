//! Command-line driver: runs calibration experiments and writes reports.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use krylov_calibrate::experiment::{self, ExperimentConfig, MatrixSource};
use krylov_calibrate::Error;

#[derive(Parser)]
#[command(
    name = "krylov-calibrate",
    version,
    about = "Calibration experiments for probabilistic linear solvers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a calibration experiment and write CSV (and optional SVG) reports.
    Calibrate(CalibrateArgs),
}

#[derive(Args)]
struct CalibrateArgs {
    /// Matrix source: a MatrixMarket file path, or
    /// gen:<name>:<order>[:<condition>] with name diag-logspace or rand-spd.
    #[arg(long)]
    matrix: String,

    /// Solver variant: random-directions, inverse-prior, krylov-full, or
    /// krylov-approx.
    #[arg(long)]
    solver: String,

    /// Comma-separated checkpoint iterations, strictly ascending.
    #[arg(long = "m", value_delimiter = ',', default_values_t = [10usize, 100, 300])]
    checkpoints: Vec<usize>,

    /// Number of test problems per checkpoint.
    #[arg(long = "ntest", default_value_t = 100)]
    n_test: usize,

    /// Master random seed.
    #[arg(long, default_value_t = 42)]
    seed: u64,

    /// Posterior rank for the krylov-approx solver.
    #[arg(long = "approx-rank", default_value_t = 50)]
    approx_rank: usize,

    /// Breakdown tolerance for the weighted basis construction.
    #[arg(long = "lanczos-eps", default_value_t = 1e-12)]
    lanczos_eps: f64,

    /// Output directory for report files.
    #[arg(long)]
    out: PathBuf,

    /// Also render SVG plots.
    #[arg(long)]
    svg: bool,
}

/// 2 = invalid configuration or input, 3 = numerical failure (including an
/// exceeded skip budget), 1 = anything else.
fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parse { .. } | Error::TooLargeForDense { .. } => 2,
        Error::SkipBudgetExceeded { .. }
        | Error::Breakdown(_)
        | Error::SingularInformation(_)
        | Error::IllConditionedFactors(_)
        | Error::NotPsd(_)
        | Error::NonProjector(_) => 3,
        Error::DimensionMismatch(_) | Error::Io(_) => 1,
    }
}

fn run_calibrate(args: &CalibrateArgs) -> Result<(), Error> {
    let matrix = MatrixSource::parse(&args.matrix)?;
    let solver = experiment::parse_solver(&args.solver, args.approx_rank)?;
    let cfg = ExperimentConfig {
        matrix,
        solver,
        checkpoints: args.checkpoints.clone(),
        n_test: args.n_test,
        seed: args.seed,
        lanczos_eps: args.lanczos_eps,
        out_dir: args.out.clone(),
        svg: args.svg,
    };
    let report = experiment::run_experiment::<f64>(&cfg)?;
    let files = experiment::write_report(&report, &cfg.out_dir, cfg.svg)?;

    println!("operator order: {}", report.matrix_order);
    for row in &report.rows {
        println!(
            "m = {:>5}: Z mean {:.5e} vs chi2 mean {:.5e}, KS {:.3} -> {} | \
             S mean {:.5e} vs trace mean {:.5e} -> {}",
            row.m,
            row.z.mean(),
            row.z.chi2_mean(),
            row.z.ks(),
            row.z_verdict.class,
            row.s.h(),
            row.s.trace_mean(),
            row.s_verdict.class,
        );
        if row.z.skipped() > 0 {
            println!(
                "  ({} of {} problems skipped after solver breakdown)",
                row.z.skipped(),
                row.z.skipped() + row.z.len()
            );
        }
    }
    println!(
        "wrote {} report files to {}",
        files.len(),
        cfg.out_dir.display()
    );
    println!("wall clock: {:.3} s", report.wall_clock.as_secs_f64());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let Command::Calibrate(args) = cli.command;
    match run_calibrate(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
