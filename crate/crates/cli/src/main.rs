//! `jumpctl`: solve, simulate and verify controlled jump processes from JSON
//! run files.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;
mod context;
mod example;
mod output;
mod simulate;
mod solve;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context as _, Result};
use clap::{Args, Parser, Subcommand};

use crate::context::Context;
use crate::output::{Artifacts, Provenance};

#[derive(Parser)]
#[command(name = "jumpctl", version, about = "Control of general jump processes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides `simulation.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Overrides `solver.tol`.
    #[arg(long)]
    tol: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Stationary HJB by policy iteration.
    Solve(Common),
    /// Finite-horizon HJB by backward time stepping.
    SolveFinite(Common),
    /// Simulate paths and their characteristics.
    Simulate(Common),
    /// Run the requested verification battery.
    Verify(Common),
    /// Closed-form examples with a cross-check against the general solver.
    Example {
        #[arg(value_parser = clap::value_parser!(u8).range(1..=3))]
        which: u8,
        #[command(flatten)]
        common: Common,
    },
    /// Print the JSON schema of run files.
    Schema,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Success,
    NotConverged,
    VerificationFailed,
}

impl Status {
    fn code(self) -> u8 {
        match self {
            Status::Success => 0,
            Status::NotConverged => 2,
            Status::VerificationFailed => 3,
        }
    }
}

/// Numerical failures exit with 2, everything else with 1.
fn error_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<jumpctl::Error>() {
            return match err {
                jumpctl::Error::Solver { .. } | jumpctl::Error::Bracket { .. } | jumpctl::Error::Boundary(_) => 2,
                _ => 1,
            };
        }
    }
    1
}

fn run(name: &str, common: &Common, body: impl FnOnce(&Context, &Artifacts) -> Result<Status>) -> Result<Status> {
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let loaded = match &common.config {
        Some(p) => config::load(p)?,
        None => config::Loaded {
            run: config::RunFile::default(),
            sha256: String::new(),
        },
    };
    let ctx = Context::new(&loaded.run, common.tol, common.seed);
    let out = Artifacts::new(
        &common.out,
        Provenance {
            command: name.into(),
            config_sha256: loaded.sha256.clone(),
            seed: ctx.seed(),
            version: output::VERSION,
        },
    )?;
    body(&ctx, &out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("JUMPCTL_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Solve(c) => run("solve", c, solve::cmd_solve),
        Command::SolveFinite(c) => run("solve-finite", c, solve::cmd_solve_finite),
        Command::Simulate(c) => run("simulate", c, simulate::cmd_simulate),
        Command::Verify(c) => run("verify", c, verify::cmd_verify),
        Command::Example { which, common } => {
            run(&format!("example {which}"), common, |ctx, out| example::cmd_example(*which, ctx, out))
        }
        Command::Schema => serde_json::to_string_pretty(&config::schema())
            .map(|s| {
                println!("{s}");
                Status::Success
            })
            .map_err(Into::into),
    };
    match result {
        Ok(s) => ExitCode::from(s.code()),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(error_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numerical_failures_map_to_two() {
        let solver = anyhow::Error::new(jumpctl::Error::Solver {
            reason: "stalled".into(),
            condition: 1e20,
        });
        assert_eq!(error_code(&solver), 2);
        let wrapped = anyhow::Error::new(jumpctl::Error::Bracket { b_hi: 1.0, samples: vec![] }).context("example 2");
        assert_eq!(error_code(&wrapped), 2);
        assert_eq!(error_code(&anyhow::Error::new(jumpctl::Error::Invalid("x".into()))), 1);
        assert_eq!(error_code(&anyhow::anyhow!("missing section")), 1);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
