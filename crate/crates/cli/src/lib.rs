//! Library side of the `ask` command-line harness: configuration parsing,
//! experiment orchestration, and report emission.

pub mod config;
pub mod experiment;
pub mod report;

/// Maps error classes to process exit codes (0 is success).
pub fn exit_code(err: &ask_core::Error) -> i32 {
    use ask_core::Error::*;
    match err {
        RejectedInput(_) | Contract(_) => 2,
        Parse { .. } => 3,
        Io(_) => 4,
        NonFiniteGradient(_) | Diverged { .. } => 5,
    }
}
