//! `relay-jscc`: train, evaluate and simulate relay DeepJSCC schemes.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime error,
//! 3 external codec unavailable.

mod download;
mod eval;
mod plot;
mod rundir;
mod simulate;
mod train;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] relay_jscc::Error),
    /// Invalid arguments or settings.
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use relay_jscc::Error as E;
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::Core(E::Config { .. } | E::CheckpointMismatch { .. }) => 1,
            CliError::Core(E::CodecUnavailable(_)) => 3,
            CliError::Core(_) => 2,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "relay-jscc", version, about = "Deep JSCC over half-duplex relay channels")]
struct Cli {
    /// More log output (-v info, -vv debug); RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one scheme from a config file into a run directory.
    Train(train::TrainArgs),
    /// Evaluate a checkpoint over a γ sweep and write records, tables and figures.
    Eval(eval::EvalArgs),
    /// Monte-Carlo check of the channel model.
    Simulate(simulate::SimulateArgs),
    /// Tables and figures from record files.
    Plot(plot::PlotArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Train(a) => train::run(a),
        Command::Eval(a) => eval::run(a),
        Command::Simulate(a) => simulate::run(a),
        Command::Plot(a) => plot::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

/// Parses a dB value, accepting `inf`.
pub fn db_arg(s: &str) -> Result<f64, String> {
    relay_jscc::serde_db::parse_db(s).ok_or_else(|| format!("`{s}` is not a dB value (a number or inf)"))
}

/// Parses a comma-separated list of dB values.
pub fn db_list(s: &str) -> Result<Vec<f64>, String> {
    s.split(',').filter(|p| !p.trim().is_empty()).map(db_arg).collect()
}

/// Parses a count written as an integer or in scientific notation (`1e6`).
pub fn count_arg(s: &str) -> Result<usize, String> {
    if let Ok(n) = s.parse::<usize>() {
        return Ok(n);
    }
    match s.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 => Ok(v as usize),
        _ => Err(format!("`{s}` is not a whole number")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argument_parsers() {
        assert_eq!(db_arg("inf").unwrap(), f64::INFINITY);
        assert_eq!(db_arg("-3.5").unwrap(), -3.5);
        assert!(db_arg("loud").is_err());
        assert_eq!(db_list("0, 2,4").unwrap(), vec![0.0, 2.0, 4.0]);
        assert_eq!(count_arg("1e6").unwrap(), 1_000_000);
        assert_eq!(count_arg("512").unwrap(), 512);
        assert!(count_arg("1.5").is_err());
    }

    #[test]
    fn exit_codes() {
        use relay_jscc::Error as E;
        let cfg = E::Config { field: "x".into(), reason: "y".into() };
        assert_eq!(CliError::from(cfg).exit_code(), 1);
        assert_eq!(CliError::from(E::CodecUnavailable("bpgenc".into())).exit_code(), 3);
        assert_eq!(CliError::from(std::io::Error::other("disk")).exit_code(), 2);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
