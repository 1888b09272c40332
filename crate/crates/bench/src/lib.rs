//! Experiment drivers behind the `convsink` command-line tool.

use std::fmt;

pub mod experiment;
pub mod simulate;

/// Invalid user input or configuration (exit code 2).
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

/// Returns early with an [`Invalid`] error.
#[macro_export]
macro_rules! invalid {
    ($($arg:tt)*) => {
        return Err(anyhow::Error::new($crate::Invalid(format!($($arg)*))))
    };
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// Exit code for an error: 2 for bad input, 3 for everything else
/// (I/O failures, divergence, corrupt checkpoints).
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use convsink::Error as CoreError;
    use convsink_model::ModelError;
    for cause in err.chain() {
        if cause.is::<Invalid>() {
            return EXIT_VALIDATION;
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e {
                CoreError::Io(_) => EXIT_RUNTIME,
                _ => EXIT_VALIDATION,
            };
        }
        if let Some(e) = cause.downcast_ref::<ModelError>() {
            return match e {
                ModelError::DivergenceDetected { .. } | ModelError::Checkpoint(_) | ModelError::Io(_) => EXIT_RUNTIME,
                ModelError::Core(CoreError::Io(_)) => EXIT_RUNTIME,
                _ => EXIT_VALIDATION,
            };
        }
        if cause.is::<serde_json::Error>() {
            return EXIT_VALIDATION;
        }
    }
    EXIT_RUNTIME
}
