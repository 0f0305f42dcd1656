use std::fmt;

use mhe_core::Error;

/// Failure class; decides the exit code and the `error[...]` tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Class {
    Config,
    Io,
    Divergence,
    Check,
}

impl Class {
    pub fn exit_code(self) -> i32 {
        match self {
            Class::Config => 2,
            Class::Io => 3,
            Class::Divergence => 4,
            Class::Check => 5,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Class::Config => "config",
            Class::Io => "io",
            Class::Divergence => "divergence",
            Class::Check => "check",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub class: Class,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError { class: Class::Config, message: message.into() }
    }

    pub fn io(message: impl Into<String>) -> Self {
        CliError { class: Class::Io, message: message.into() }
    }

    pub fn check(message: impl Into<String>) -> Self {
        CliError { class: Class::Check, message: message.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let class = match e {
            Error::Io { .. } | Error::Format { .. } => Class::Io,
            Error::Divergence(_) | Error::NonFinite(_) => Class::Divergence,
            Error::Shape(_) | Error::InvalidArgument(_) | Error::Checkpoint(_) | Error::Graph(_) => Class::Config,
        };
        CliError { class, message: e.to_string() }
    }
}

/// Single line: `error[class]: message`.
impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msg = self.message.split_whitespace().collect::<Vec<_>>().join(" ");
        write!(f, "error[{}]: {msg}", self.class.tag())
    }
}
