use std::fmt;

/// Failure of a subcommand, printed as `ERROR:<module>:<kind>: <message>`.
#[derive(Debug)]
pub struct CliError {
    pub module: &'static str,
    pub kind: String,
    pub message: String,
}

impl CliError {
    pub fn new(module: &'static str, kind: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            module,
            kind: kind.into(),
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new("cli", "usage", message)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // single line, whatever the message contains
        let msg = self.message.replace('\n', " ");
        write!(f, "ERROR:{}:{}: {}", self.module, self.kind, msg)
    }
}

/// Tags a library error with the module that raised it.
pub trait Context<T> {
    fn within(self, module: &'static str) -> Result<T, CliError>;
}

impl<T> Context<T> for vfm4sdg::Result<T> {
    fn within(self, module: &'static str) -> Result<T, CliError> {
        self.map_err(|e| CliError::new(module, e.kind().to_string(), e.to_string()))
    }
}

pub const TENSOR: &str = "tensor-core";
pub const DISTILL: &str = "relation-distill";
pub const PROTOTYPE: &str = "prototype-bank";
pub const ENHANCE: &str = "query-enhance";
pub const METRICS: &str = "detect-metrics";
pub const IO: &str = "artifact-io";
