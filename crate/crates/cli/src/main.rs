//! `vcclt`: fixed-point solves, spectral densities, CLT summaries, Monte Carlo
//! runs and the full-sib estimation table from a JSON config.
//!
//! Exit status: 0 success, 1 config or I/O error, 2 solver non-convergence,
//! 3 numerical-quality failure.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{Overrides, RunConfig};
use error::CliError;

#[derive(Parser, Debug)]
#[command(
    name = "vcclt",
    version,
    about = "Spectral CLT toolkit for multi-level variance-component models"
)]
struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    common: CommonFlags,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct CommonFlags {
    /// Trapezoid nodes per contour.
    #[arg(long, global = true)]
    nodes: Option<usize>,
    /// Minimum clearance between the support bound and the contour.
    #[arg(long, global = true)]
    margin: Option<f64>,
    /// Clearance as a fraction of the support half-width.
    #[arg(long, global = true)]
    relative_margin: Option<f64>,
    /// Radius ratio of the outer contour.
    #[arg(long, global = true)]
    radius_ratio: Option<f64>,
    /// Master seed of replicated runs.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Monte Carlo replicates.
    #[arg(long, global = true)]
    replicates: Option<usize>,
    /// Output directory, created if missing.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Also write SVG histograms.
    #[arg(long, global = true)]
    svg: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve the fixed-point system at points z.
    Solve {
        /// Point as `re,im`; repeatable.
        #[arg(long = "z", value_parser = parse_point, allow_hyphen_values = true)]
        points: Vec<[f64; 2]>,
    },
    /// Deterministic-equivalent spectral density on a grid.
    Density {
        #[arg(long)]
        eta: Option<f64>,
        /// Number of grid points.
        #[arg(long)]
        points: Option<usize>,
    },
    /// Centering, bias and covariance of the configured statistics.
    Clt,
    /// Monte Carlo draws standardized by the CLT summary.
    Simulate,
    /// Replicated moment estimation on a full-sib design.
    Table1 {
        /// Summaries written by `vcclt clt` to reuse instead of recomputing.
        #[arg(long)]
        clt_summary: Option<PathBuf>,
        /// Number of families.
        #[arg(long)]
        families: Option<usize>,
        /// Number of traits.
        #[arg(long)]
        traits: Option<usize>,
    },
}

fn parse_point(s: &str) -> Result<[f64; 2], String> {
    let (re, im) = s
        .split_once(',')
        .ok_or_else(|| format!("expected re,im but got {s:?}"))?;
    let parse = |t: &str| t.trim().parse::<f64>().map_err(|e| format!("{t:?}: {e}"));
    Ok([parse(re)?, parse(im)?])
}

fn run(cli: Cli) -> Result<(), CliError> {
    let c = cli.common;
    let mut overrides = Overrides {
        nodes: c.nodes,
        margin: c.margin,
        relative_margin: c.relative_margin,
        radius_ratio: c.radius_ratio,
        seed: c.seed,
        replicates: c.replicates,
        out: c.out,
        svg: c.svg,
        ..Default::default()
    };
    let mut summaries = None;
    match &cli.command {
        Command::Solve { points } => overrides.points = points.clone(),
        Command::Density { eta, points } => {
            overrides.eta = *eta;
            overrides.grid_points = *points;
        }
        Command::Table1 {
            clt_summary,
            families,
            traits,
        } => {
            overrides.families = *families;
            overrides.traits = *traits;
            summaries = clt_summary.clone();
        }
        Command::Clt | Command::Simulate => {}
    }
    let cfg = RunConfig::resolve(cli.config.as_deref(), &overrides)?;
    match cli.command {
        Command::Solve { .. } => commands::solve(&cfg),
        Command::Density { .. } => commands::density(&cfg),
        Command::Clt => commands::clt(&cfg),
        Command::Simulate => commands::simulate(&cfg),
        Command::Table1 { .. } => commands::table1(&cfg, summaries.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    vcclt::rng::init_thread_pool();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("vcclt: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn points_parse() {
        assert_eq!(parse_point("1.5,-2").unwrap(), [1.5, -2.0]);
        assert!(parse_point("1.5").is_err());
        assert!(parse_point("a,1").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
