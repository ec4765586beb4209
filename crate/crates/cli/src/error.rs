//! Exit-code classification and the one-line error format.

use fsvi::FsviError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    User,
    Numerical,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

impl CliError {
    pub fn user(message: impl Into<String>) -> Self {
        Self { kind: Kind::User, message: message.into() }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            Kind::User => 1,
            Kind::Numerical => 2,
        }
    }

    /// `{"error":"user","message":"..."}` on a single line.
    pub fn to_line(&self) -> String {
        let kind = match self.kind {
            Kind::User => "user",
            Kind::Numerical => "numerical",
        };
        serde_json::json!({ "error": kind, "message": self.message }).to_string()
    }
}

impl From<FsviError> for CliError {
    fn from(e: FsviError) -> Self {
        Self { kind: if e.is_numerical() { Kind::Numerical } else { Kind::User }, message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::user(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::user(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
