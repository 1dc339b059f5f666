use std::fmt;

use dmsl_annotate::AnnotateError;

pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    Core(dmsl_core::Error),
    Annotate(AnnotateError),
    /// Bad arguments or inputs caught by the CLI itself.
    Invalid(String),
    Runtime(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        let validation = match self {
            CliError::Core(e) => e.is_validation(),
            CliError::Annotate(e) => e.is_validation(),
            CliError::Invalid(_) => true,
            CliError::Runtime(_) => false,
        };
        if validation {
            EXIT_VALIDATION
        } else {
            EXIT_RUNTIME
        }
    }

    pub fn kind(&self) -> &'static str {
        if self.exit_code() == EXIT_VALIDATION {
            "validation"
        } else {
            "runtime"
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "error": self.kind(),
            "message": self.to_string(),
            "exit_code": self.exit_code(),
        })
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => e.fmt(f),
            CliError::Annotate(e) => e.fmt(f),
            CliError::Invalid(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<dmsl_core::Error> for CliError {
    fn from(e: dmsl_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<AnnotateError> for CliError {
    fn from(e: AnnotateError) -> Self {
        match e {
            AnnotateError::Core(c) => CliError::Core(c),
            other => CliError::Annotate(other),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Core(e.into())
    }
}
