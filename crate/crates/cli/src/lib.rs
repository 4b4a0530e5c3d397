//! Command implementations behind the `cwssnet` binary.

pub mod ablate;
pub mod analyze;
pub mod commands;
pub mod config;

use std::fmt;

pub use ablate::cmd_ablate;
pub use analyze::cmd_analyze_params;
pub use commands::{cmd_eval, cmd_predict, cmd_synth, cmd_train};
pub use config::{Overrides, RunConfig};

/// Failure classes with their own exit codes. Attached as error context.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Failure {
    Config,
    Data,
    Numeric,
}

impl Failure {
    pub fn exit_code(self) -> i32 {
        match self {
            Failure::Config => 2,
            Failure::Data => 3,
            Failure::Numeric => 4,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Failure::Config => "configuration error",
            Failure::Data => "data error",
            Failure::Numeric => "numeric failure",
        })
    }
}

/// Exit status for a failed command: a non-finite value anywhere in the
/// chain wins, then the outermost tagged class, otherwise 1.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let non_finite = err
        .chain()
        .any(|e| matches!(e.downcast_ref::<cwssnet::Error>(), Some(cwssnet::Error::NonFinite { .. })));
    if non_finite {
        return Failure::Numeric.exit_code();
    }
    err.downcast_ref::<Failure>().map_or(1, |f| f.exit_code())
}

/// Sizes the global worker pool from `CWSSNET_THREADS` when set.
pub fn init_threads() -> anyhow::Result<()> {
    use anyhow::Context;
    let Ok(value) = std::env::var("CWSSNET_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| anyhow::anyhow!("CWSSNET_THREADS must be a positive integer, got {value:?}"))
        .context(Failure::Config)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring worker threads")?;
    Ok(())
}

/// Progress lines on standard error.
#[derive(Clone, Copy, Debug, Default)]
pub struct Console {
    pub quiet: bool,
}

impl Console {
    pub fn line(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}
