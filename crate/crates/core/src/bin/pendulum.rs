use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use hamel_pendulum::scenario::{
    convergence_command, parse_step_list, run_scenario, ConfigLayer, HarnessError, IntegratorKind,
};

/// Spherical pendulum simulations with conservation diagnostics.
#[derive(Debug, Parser)]
#[command(name = "pendulum", version)]
struct Cli {
    /// Integrator: hamel, sv, rattle or rk4.
    #[arg(long)]
    integrator: Option<IntegratorKind>,

    /// Named scenario: paper-fig1 or equator-cross.
    #[arg(long)]
    preset: Option<String>,

    /// Flat key = value configuration file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Time step in seconds.
    #[arg(long)]
    h: Option<f64>,

    /// Number of steps.
    #[arg(long)]
    steps: Option<usize>,

    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Solver tolerance.
    #[arg(long)]
    tolerance: Option<f64>,

    /// Compensated accumulation of the clock and running means.
    #[arg(long)]
    compensated: bool,

    /// Final time of a convergence study (default 1 s).
    #[arg(long, value_name = "SECONDS")]
    t_final: Option<f64>,

    /// Run a convergence study over these step sizes instead of a single run.
    #[arg(long, value_name = "H1,H2,...")]
    convergence: Option<String>,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    let mut layer = match &cli.preset {
        Some(name) => ConfigLayer::preset(name)?,
        None => ConfigLayer::default(),
    };
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path).map_err(|source| HarnessError::Io {
            context: format!("reading {}", path.display()),
            source,
        })?;
        layer = layer.merge(ConfigLayer::parse(&text)?);
    }
    layer = layer.merge(ConfigLayer {
        integrator: cli.integrator,
        h: cli.h,
        steps: cli.steps,
        out: cli.out.clone(),
        tolerance: cli.tolerance,
        compensated: cli.compensated.then_some(true),
        t_final: cli.t_final,
        ..Default::default()
    });
    let cfg = layer.build()?;

    if let Some(list) = &cli.convergence {
        let steps = parse_step_list(list)?;
        let report = convergence_command(&cfg, &steps)?;
        for ((h, e), order) in report
            .step_sizes
            .iter()
            .zip(&report.errors)
            .zip(report.orders.iter().map(Some).chain([None]))
        {
            match order {
                Some(p) => println!("h = {h:<10} error = {e:.6e}  order = {p:.4}"),
                None => println!("h = {h:<10} error = {e:.6e}"),
            }
        }
        return Ok(());
    }

    let summary = run_scenario(&cfg)?;
    println!(
        "{} steps with {}: max |dnorm| = {:.3e}, max |dE| = {:.3e} J, max |dJ| = {:.3e} kg m^2/s",
        summary.rows - 1,
        cfg.integrator,
        summary.max_norm_error,
        summary.max_energy_error,
        summary.max_momentum_error,
    );
    eprintln!("wall clock: {:.3} s", summary.wall_clock_seconds);
    Ok(())
}
