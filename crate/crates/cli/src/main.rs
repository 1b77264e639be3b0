use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};

use cnfem_core::checks::run_checks;
use cnfem_core::experiments::{run_model_1, run_model_2, run_pincers_illustration, ExperimentConfig, ExperimentKind};
use cnfem_core::{Error, Evaluator};

#[derive(Parser)]
#[command(name = "cnfem", version, about = "Second-grade elasticity with a self-contact penalty on BFS elements")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Interpolate the prescribed pincers map and evaluate penalty and diagnostics.
    Pincers(RunArgs),
    /// Two-box model, sweep over the Dirichlet shift m2.
    Model1(RunArgs),
    /// Pincers under a body force, sweep over the penalty weight mu.
    Model2(RunArgs),
    /// Run the gradient, evaluator-equivalence and invariance checks.
    Check(CheckArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the configuration).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Penalty evaluator: full, accelerated or both.
    #[arg(long)]
    evaluator: Option<Evaluator>,
    /// Worker threads for the parallel evaluations.
    #[arg(long)]
    threads: Option<usize>,
    /// Write the per-iteration energy trace of each solve.
    #[arg(long)]
    trace: bool,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long)]
    threads: Option<usize>,
}

fn set_threads(threads: Option<usize>) -> Result<(), Error> {
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Configuration(e.to_string()))?;
    }
    Ok(())
}

fn usage_error(message: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {message}\n");
    eprintln!("{}", Cli::command().render_usage());
    ExitCode::from(2)
}

fn run(kind: ExperimentKind, args: RunArgs) -> ExitCode {
    let mut config = match ExperimentConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => return usage_error(e),
    };
    if config.kind != kind {
        return usage_error(format!("configuration kind {:?} does not match the subcommand", config.kind));
    }
    if let Some(out) = args.out {
        config.output_dir = out;
    }
    if let Some(ev) = args.evaluator {
        config.evaluator = ev;
    }
    config.trace |= args.trace;
    if let Err(e) = set_threads(args.threads) {
        return usage_error(e);
    }
    let result = match kind {
        ExperimentKind::PincersIllustration => run_pincers_illustration(&config).map(|o| {
            for case in &o.cases {
                println!("eps2 = {}: E_cn = {:.6e}", case.eps2, case.energy);
            }
            println!(
                "cn_gap = {:.6e} (raster tolerance {:.3e}), min det = {:.6}",
                o.diagnostics.cn_gap, o.diagnostics.raster_tolerance, o.diagnostics.min_det_interior
            );
            (o.files.len(), None)
        }),
        ExperimentKind::Model1 | ExperimentKind::Model2 => {
            let outcome = if kind == ExperimentKind::Model1 { run_model_1(&config) } else { run_model_2(&config) };
            outcome.map(|o| {
                for r in &o.rows {
                    println!(
                        "eps2 = {} value = {}: total {:.6e}, mu E_cn {:.6e}, cn_gap {:.4e} (tol {:.3e}), converged {}",
                        r.eps2, r.value, r.terms.total, r.terms.penalty_scaled, r.diagnostics.cn_gap,
                        r.diagnostics.raster_tolerance, r.report.converged
                    );
                }
                (o.files.len(), o.failure)
            })
        }
    };
    match result {
        Ok((files, None)) => {
            println!("wrote {files} files to {}", config.output_dir.display());
            ExitCode::SUCCESS
        }
        Ok((_, Some((eps2, value, message)))) => {
            eprintln!("sweep failed at eps2 = {eps2}, value = {value}: {message}");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match cli.command {
        Command::Pincers(a) => run(ExperimentKind::PincersIllustration, a),
        Command::Model1(a) => run(ExperimentKind::Model1, a),
        Command::Model2(a) => run(ExperimentKind::Model2, a),
        Command::Check(a) => {
            if let Err(e) = set_threads(a.threads) {
                return usage_error(e);
            }
            match run_checks() {
                Ok(results) => {
                    let mut ok = true;
                    for r in &results {
                        println!("[{}] {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
                        ok &= r.passed;
                    }
                    if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::FAILURE
                }
            }
        }
    }
}
