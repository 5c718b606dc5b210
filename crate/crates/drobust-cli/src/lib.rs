//! Command-line harness for distributionally robust off-policy evaluation
//! and learning: dataset simulation, evaluation/learning runs and sweeps,
//! degeneracy reports, and Monte Carlo ground-truth oracles.
//!
//! The binary front end (`drobust`) is a thin dispatcher over this
//! library; everything testable lives here. Exit codes are part of the
//! interface: 0 success, 2 configuration error, 3 data error, 4
//! optimization failure.

pub mod baseline;
pub mod cache;
pub mod envspec;
pub mod io;
pub mod run;

use drobust_core::Error as CoreError;

/// Harness-level error, carrying the process exit code it maps to.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, bad config files, inconsistent settings → exit 2.
    #[error("configuration error: {0}")]
    Config(String),
    /// Unreadable/invalid data files or malformed inputs → exit 3.
    #[error("data error: {0}")]
    Data(String),
    /// The requested estimation/learning run itself failed → exit 4.
    #[error("optimization failure: {0}")]
    Optimization(String),
}

impl CliError {
    /// Process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Optimization(_) => 4,
        }
    }

    pub(crate) fn config(msg: String) -> CliError {
        CliError::Config(msg)
    }

    pub(crate) fn data(msg: String) -> CliError {
        CliError::Data(msg)
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> CliError {
        match e {
            CoreError::InvalidConfiguration { .. }
            | CoreError::Domain { .. }
            | CoreError::Shape { .. } => CliError::Config(e.to_string()),
            CoreError::InvalidData { .. }
            | CoreError::OverlapViolation { .. }
            | CoreError::DegenerateWeights
            | CoreError::DegenerateFit { .. } => CliError::Data(e.to_string()),
            CoreError::DrNegativeW | CoreError::OptimizationFailure { .. } => {
                CliError::Optimization(e.to_string())
            }
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> CliError {
        CliError::Data(format!("I/O: {e}"))
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> CliError {
        CliError::Data(format!("CSV: {e}"))
    }
}

/// Resolve the worker count: `--jobs` flag, else the `DROBUST_JOBS`
/// environment variable, else all available cores.
pub fn job_count(flag: Option<usize>) -> Result<usize, CliError> {
    let jobs = match flag {
        Some(j) => j,
        None => match std::env::var("DROBUST_JOBS") {
            Ok(v) => v.parse().map_err(|_| {
                CliError::config(format!("DROBUST_JOBS must be a positive integer, got '{v}'"))
            })?,
            Err(_) => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        },
    };
    if jobs == 0 {
        return Err(CliError::config("worker count must be at least 1".to_string()));
    }
    Ok(jobs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_contract() {
        assert_eq!(CliError::Config(String::new()).exit_code(), 2);
        assert_eq!(CliError::Data(String::new()).exit_code(), 3);
        assert_eq!(CliError::Optimization(String::new()).exit_code(), 4);
    }

    #[test]
    fn core_errors_map_to_the_right_codes() {
        let config = CoreError::InvalidConfiguration { reason: "x".to_string() };
        assert_eq!(CliError::from(config).exit_code(), 2);
        let data = CoreError::OverlapViolation { index: 3 };
        assert_eq!(CliError::from(data).exit_code(), 3);
        let opt = CoreError::DrNegativeW;
        assert_eq!(CliError::from(opt).exit_code(), 4);
    }

    #[test]
    fn explicit_jobs_flag_wins() {
        assert_eq!(job_count(Some(3)).unwrap(), 3);
        assert!(job_count(Some(0)).is_err());
    }
}
