use std::fmt;

use serde::Serialize;

/// Exit code 1: I/O or configuration problem.
pub const EXIT_IO_CONFIG: i32 = 1;
/// Exit code 2: input violated a data or model contract.
pub const EXIT_CONTRACT: i32 = 2;

#[derive(Debug, Clone, Serialize)]
pub struct Failure {
    pub kind: &'static str,
    pub message: String,
    #[serde(skip)]
    pub code: i32,
}

impl Failure {
    pub fn io(message: impl Into<String>) -> Self {
        Self { kind: "io", message: message.into(), code: EXIT_IO_CONFIG }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self { kind: "config", message: message.into(), code: EXIT_IO_CONFIG }
    }

    pub fn contract(message: impl Into<String>) -> Self {
        Self { kind: "contract", message: message.into(), code: EXIT_CONTRACT }
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self, "exit_code": self.code }).to_string()
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::io(e.to_string())
    }
}
