//! Benchmark and recovery CLI.
//!
//! Exit codes: 0 on success, 2 on configuration/input errors, 3 on
//! numeric failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use amrf_core::adaptive::{adaptive_mrf_recover, fixed_mrf_recover, oracle_estimate, OuterOptions};
use amrf_core::baselines::omp;
use amrf_core::bench::{psnr, run_experiment, write_outer_trace, ExperimentConfig, SolverKind};
use amrf_core::error::Error;
use amrf_core::io;
use amrf_core::mrf::{BoltzmannMachine, NeighborhoodSpec, SpinVector};
use amrf_core::recovery::InnerOptions;
use amrf_core::sensing::SensingMatrix;

#[derive(Parser)]
#[command(
    name = "amrf-cs",
    version,
    about = "Compressive sensing with an adaptive MRF support prior"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a full experiment sweep from a JSON config.
    Run(RunArgs),
    /// Recover one signal from a matrix and measurement CSV.
    Recover(RecoverArgs),
    /// Peak signal-to-noise ratio between two vector CSVs.
    Psnr(PsnrArgs),
    /// Generate a synthetic structured sparse signal.
    Gen(GenArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Path to the experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct RecoverArgs {
    /// Sensing matrix CSV (M rows, N columns; columns are normalized on load).
    #[arg(long)]
    matrix: PathBuf,
    /// Measurement vector CSV (length M).
    #[arg(long)]
    y: PathBuf,
    /// One of: adaptive, fixed, oracle, omp.
    #[arg(long)]
    solver: String,
    /// Output CSV for the recovered signal.
    #[arg(long)]
    out: PathBuf,
    /// Optional outer-trace CSV (adaptive solver only).
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Grid dimensions HxW for the 8-neighborhood; defaults to a 1-D chain.
    #[arg(long)]
    grid: Option<String>,
    /// Trained prior JSON (fixed solver).
    #[arg(long)]
    bm: Option<PathBuf>,
    /// Ground-truth support CSV of ±1 values (oracle solver).
    #[arg(long)]
    support: Option<PathBuf>,
    /// Noise variance for the oracle solver.
    #[arg(long, default_value_t = 1e-12)]
    sigma: f64,
    /// Atom budget for OMP; defaults to M/2.
    #[arg(long)]
    k: Option<usize>,
    /// Residual tolerance for OMP.
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
}

#[derive(Args)]
struct PsnrArgs {
    /// Reference vector CSV.
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Reconstruction vector CSV.
    #[arg(long)]
    rec: PathBuf,
    /// Peak value for the ratio.
    #[arg(long)]
    peak: f64,
}

#[derive(Args)]
struct GenArgs {
    /// Signal spec N,k,clusters,amplitude (e.g. 256,26,3,1.0).
    #[arg(long)]
    synthetic: String,
    #[arg(long)]
    seed: u64,
    /// Arrange clusters as rectangular blobs on an HxW grid.
    #[arg(long)]
    grid: Option<String>,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_grid(text: &str) -> Result<(usize, usize), Error> {
    let parts: Vec<&str> = text.split('x').collect();
    if parts.len() != 2 {
        return Err(Error::InvalidConfig(format!(
            "grid must look like HxW, got {text:?}"
        )));
    }
    let h = parts[0]
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("bad grid height {:?}", parts[0])))?;
    let w = parts[1]
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("bad grid width {:?}", parts[1])))?;
    Ok((h, w))
}

fn neighborhood_for(n: usize, grid: &Option<String>) -> Result<NeighborhoodSpec, Error> {
    match grid {
        Some(text) => {
            let (h, w) = parse_grid(text)?;
            if h * w != n {
                return Err(Error::InvalidConfig(format!(
                    "grid {h}x{w} does not match signal length {n}"
                )));
            }
            Ok(NeighborhoodSpec::Grid8 {
                height: h,
                width: w,
            })
        }
        None => Ok(NeighborhoodSpec::Chain2 { len: n }),
    }
}

fn cmd_run(args: &RunArgs) -> Result<(), Error> {
    let config = ExperimentConfig::from_json_file(&args.config)?;
    let report = run_experiment(&config)?;
    println!(
        "wrote {} rows to {}",
        report.results.len(),
        report.results_csv.display()
    );
    println!("summary at {}", report.summary_json.display());
    Ok(())
}

fn cmd_recover(args: &RecoverArgs) -> Result<(), Error> {
    let a = SensingMatrix::from_entries(io::read_matrix_csv(&args.matrix)?)?;
    let y = io::read_vector_csv(&args.y)?;
    let solver: SolverKind = args.solver.parse()?;
    let n = a.cols();

    let x = match solver {
        SolverKind::Adaptive => {
            let opts = OuterOptions::new(neighborhood_for(n, &args.grid)?);
            let out = adaptive_mrf_recover(&a, &y, &opts, None)?;
            if let Some(path) = &args.trace {
                write_outer_trace(path, &out.trace)?;
            }
            out.x
        }
        SolverKind::Fixed => {
            let bm_path = args
                .bm
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig("fixed solver needs --bm".into()))?;
            let bm = BoltzmannMachine::from_json(&std::fs::read_to_string(bm_path)?)?;
            let out = fixed_mrf_recover(&a, &y, &bm, &InnerOptions::default())?;
            if let Some(path) = &args.trace {
                amrf_core::bench::write_inner_trace(path, &out.trace)?;
            }
            out.x
        }
        SolverKind::Oracle => {
            let path = args
                .support
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig("oracle solver needs --support".into()))?;
            let raw = io::read_vector_csv(path)?;
            if raw.len() != n {
                return Err(Error::InvalidDimension(format!(
                    "support length {} does not match {} columns",
                    raw.len(),
                    n
                )));
            }
            let s = SpinVector::from_signs(raw.as_slice());
            oracle_estimate(&a, &y, &s, args.sigma, None)?
        }
        SolverKind::Omp => {
            let k = args.k.unwrap_or((a.rows() / 2).max(1));
            omp(&a, &y, k, args.tol)?
        }
    };

    io::write_vector_csv(&args.out, &x)?;
    println!("wrote {} coefficients to {}", x.len(), args.out.display());
    Ok(())
}

fn cmd_psnr(args: &PsnrArgs) -> Result<(), Error> {
    let reference = io::read_vector_csv(&args.reference)?;
    let rec = io::read_vector_csv(&args.rec)?;
    let value = psnr(&reference, &rec, args.peak)?;
    if value.is_infinite() {
        println!("inf");
    } else {
        println!("{value}");
    }
    Ok(())
}

fn cmd_gen(args: &GenArgs) -> Result<(), Error> {
    let parts: Vec<&str> = args.synthetic.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return Err(Error::InvalidConfig(format!(
            "--synthetic expects N,k,clusters,amplitude, got {:?}",
            args.synthetic
        )));
    }
    let n: usize = parts[0]
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("bad N {:?}", parts[0])))?;
    let k: usize = parts[1]
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("bad k {:?}", parts[1])))?;
    let clusters: usize = parts[2]
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("bad cluster count {:?}", parts[2])))?;
    let amplitude: f64 = parts[3]
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("bad amplitude {:?}", parts[3])))?;

    let x = match &args.grid {
        Some(text) => {
            let (h, w) = parse_grid(text)?;
            if h * w != n {
                return Err(Error::InvalidConfig(format!(
                    "grid {h}x{w} does not match N={n}"
                )));
            }
            amrf_core::bench::gen_synthetic_structured_2d(h, w, k, clusters, amplitude, args.seed)?
        }
        None => amrf_core::bench::gen_synthetic_structured(n, k, clusters, amplitude, args.seed)?,
    };

    match &args.out {
        Some(path) => {
            io::write_vector_csv(path, &x)?;
            println!("wrote {} coefficients to {}", x.len(), path.display());
        }
        None => {
            let mut text = String::new();
            for i in 0..x.len() {
                text.push_str(&format!("{}\n", x[i]));
            }
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Recover(args) => cmd_recover(args),
        Command::Psnr(args) => cmd_psnr(args),
        Command::Gen(args) => cmd_gen(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            if err.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
