//! `palm-lab` command-line driver: data generation, training, evaluation,
//! Jacobian verification, sensitivity curves and cross-variant comparison.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use palm_lab_core::LabError;

pub use config::{EvalSettings, ExperimentConfig};

/// Successful run.
pub const EXIT_OK: i32 = 0;
/// Bad flags, unreadable or invalid inputs.
pub const EXIT_USAGE: i32 = 2;
/// Divergence, non-finite values, failed numerical verification.
pub const EXIT_NUMERICAL: i32 = 3;

/// Raised when a numerical check runs to completion but does not pass.
#[derive(Debug)]
pub struct VerificationFailed(pub String);

impl std::fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "verification failed: {}", self.0)
    }
}

impl std::error::Error for VerificationFailed {}

#[derive(Debug, Parser)]
#[command(name = "palm-lab", version, about = "Attention-degeneration experiments on toy seq2seq tasks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic parallel corpus from a task spec.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes the checkpoint and `<out>.loss.csv`.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Greedy-decode a corpus with a checkpoint and write metrics JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        metrics: PathBuf,
    },
    /// Check the closed-form attention Jacobians against finite differences.
    JacobianVerify {
        #[arg(long, default_value_t = 200)]
        trials: usize,
        /// Instance size, e.g. `d=8,n=6,i=4`.
        #[arg(long, default_value = "d=8,n=6,i=4")]
        dims: String,
    },
    /// Sensitivity of attention output to source rows as a function of the step.
    Sensitivity {
        #[arg(long)]
        mode: String,
        /// Source length.
        #[arg(long = "N")]
        n: usize,
        /// Number of target steps.
        #[arg(long)]
        imax: usize,
        /// `K` for seeds 0..K, `a..b`, or `a,b,c`.
        #[arg(long)]
        seeds: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate every config of a directory on a shared split.
    Compare {
        #[arg(long)]
        configs: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Runs one command and returns its stdout text.
pub fn execute(command: &Command) -> anyhow::Result<String> {
    match command {
        Command::GenData { spec, out } => commands::gen_data(spec, out),
        Command::Train { config, data, out } => commands::cmd_train(config, data, out),
        Command::Eval { checkpoint, data, metrics } => commands::cmd_eval(checkpoint, data, metrics),
        Command::JacobianVerify { trials, dims } => commands::cmd_jacobian_verify(*trials, dims),
        Command::Sensitivity { mode, n, imax, seeds, out } => commands::cmd_sensitivity(mode, *n, *imax, seeds, out),
        Command::Compare { configs, data, out } => commands::cmd_compare(configs, data, out),
    }
}

/// Exit code for an error: numerical failures anywhere in the chain give 3, everything else 2.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let numerical = err.chain().any(|e| {
        e.is::<VerificationFailed>()
            || matches!(
                e.downcast_ref::<LabError>(),
                Some(LabError::Diverged { .. } | LabError::NonFinite(_) | LabError::NoConvergence { .. })
            )
    });
    if numerical {
        EXIT_NUMERICAL
    } else {
        EXIT_USAGE
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_error_kind() {
        let diverged = anyhow::Error::from(LabError::Diverged { epoch: 2 }).context("training LM");
        assert_eq!(exit_code(&diverged), EXIT_NUMERICAL);
        assert_eq!(exit_code(&VerificationFailed("x".into()).into()), EXIT_NUMERICAL);
        assert_eq!(exit_code(&anyhow::anyhow!("missing file")), EXIT_USAGE);
        assert_eq!(exit_code(&LabError::Config("bad".into()).into()), EXIT_USAGE);
    }

    #[test]
    fn flags_parse_as_documented() {
        let cli = Cli::try_parse_from(["palm-lab", "sensitivity", "--mode", "cross", "--N", "8", "--imax", "4", "--seeds", "2", "--out", "x.csv"]).unwrap();
        assert!(matches!(cli.command, Command::Sensitivity { n: 8, imax: 4, .. }));
        let cli = Cli::try_parse_from(["palm-lab", "jacobian-verify"]).unwrap();
        assert!(matches!(cli.command, Command::JacobianVerify { trials: 200, .. }));
        assert!(Cli::try_parse_from(["palm-lab", "train", "--config", "c.json"]).is_err());
    }
}
