//! Command-line front end: `run`, `check`, `calibrate`, `invert`.

pub mod checks;
pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::{EXIT_BLOWUP, EXIT_FAILURE, EXIT_INVARIANT, EXIT_OK};
pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(
    name = "webster-flow",
    version,
    about = "Webster-curvature energy flow on model CR 3-manifolds, and the Heisenberg CR inversion",
    after_help = "Exit codes: 0 success, 1 configuration or I/O error, 2 failed invariant, 3 blow-up.\n\
                  Relative output paths are resolved under $WEBSTER_FLOW_OUT when it is set."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Integrate the flow described by a JSON config and write diagnostics.
    Run {
        /// Path to the run config (JSON).
        config: PathBuf,
        /// Output directory; overrides `output_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the invariant suite and print a pass/fail table.
    Check {
        /// Restrict to one or more suites: manifold, operators, flow, inversion.
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(checks::SUITES))]
        only: Vec<String>,
        /// Test fixture: break the symmetry of one sector stencil tap.
        #[arg(long, hide = true)]
        corrupt_stencil: bool,
    },
    /// Calibrate the sphere background curvature and write the convention cache.
    Calibrate {
        /// Cache file (default: $WEBSTER_FLOW_OUT/conventions_cache.json or ./conventions_cache.json).
        #[arg(long)]
        cache: Option<PathBuf>,
        /// Test fixture: exponent of (t² + (1 + |z|²)²) in the trial factor.
        #[arg(long, hide = true, default_value_t = -0.5, allow_hyphen_values = true)]
        u_exponent: f64,
    },
    /// Apply the CR inversion to the point (t, x + iy) and print a JSON record.
    Invert {
        #[arg(allow_hyphen_values = true)]
        t: f64,
        #[arg(allow_hyphen_values = true)]
        x: f64,
        #[arg(allow_hyphen_values = true)]
        y: f64,
    },
}

pub fn dispatch(cli: Cli) -> i32 {
    match cli.command {
        Command::Run { config, out } => commands::cmd_run(&config, out.as_deref()),
        Command::Check {
            only,
            corrupt_stencil,
        } => {
            let results = checks::run_checks(&only, checks::CheckOptions { corrupt_stencil });
            print!("{}", checks::render_table(&results));
            let failed: Vec<_> = results.iter().filter(|r| !r.passed).map(|r| r.property).collect();
            if failed.is_empty() {
                println!("all {} checks passed", results.len());
                EXIT_OK
            } else {
                eprintln!("failed: {}", failed.join(", "));
                EXIT_INVARIANT
            }
        }
        Command::Calibrate { cache, u_exponent } => commands::cmd_calibrate(cache.as_deref(), u_exponent),
        Command::Invert { t, x, y } => commands::cmd_invert(t, x, y),
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => dispatch(cli),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                EXIT_FAILURE
            } else {
                EXIT_OK
            }
        }
    }
}
