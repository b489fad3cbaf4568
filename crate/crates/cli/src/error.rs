//! Exit codes. Registry error codes map one-to-one onto 10..=20.

use std::fmt;
use std::io;
use std::path::Path;

use saga_core::agent::AgentError;
use saga_core::registry::{ErrorCode, RegistryError};
use saga_core::service::ServiceError;
use saga_core::transport::TransportError;

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_REJECTED: i32 = 21;
pub const EXIT_UNREACHABLE: i32 = 22;
pub const EXIT_HARNESS: i32 = 23;

pub fn registry_exit_code(code: ErrorCode) -> i32 {
    match code {
        ErrorCode::AuthFailed => 10,
        ErrorCode::Conflict => 11,
        ErrorCode::NotPermitted => 12,
        ErrorCode::QuotaExhausted => 13,
        ErrorCode::PoolExhausted => 14,
        ErrorCode::NotFound => 15,
        ErrorCode::BadSignature => 16,
        ErrorCode::Forbidden => 17,
        ErrorCode::NotHuman => 18,
        ErrorCode::Invalid => 19,
        ErrorCode::Internal => 20,
    }
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn failure(message: impl Into<String>) -> Self {
        Self::new(EXIT_FAILURE, message)
    }

    pub fn io(path: &Path, e: io::Error) -> Self {
        Self::failure(format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<RegistryError> for CliError {
    fn from(e: RegistryError) -> Self {
        Self::new(registry_exit_code(e.code()), format!("{}: {e}", e.code().as_str()))
    }
}

impl From<TransportError> for CliError {
    fn from(e: TransportError) -> Self {
        match e {
            TransportError::AddressInUse(addr) => {
                Self::failure(format!("port {} is already in use ({addr})", addr.port()))
            }
            TransportError::Unreachable(addr) => Self::new(EXIT_UNREACHABLE, format!("cannot reach {addr}")),
            other => Self::new(EXIT_UNREACHABLE, other.to_string()),
        }
    }
}

impl From<ServiceError> for CliError {
    fn from(e: ServiceError) -> Self {
        match e {
            ServiceError::Registry(e) => e.into(),
            ServiceError::Transport(e) => e.into(),
            ServiceError::Protocol(m) => Self::failure(format!("provider protocol error: {m}")),
        }
    }
}

impl From<AgentError> for CliError {
    fn from(e: AgentError) -> Self {
        match e {
            AgentError::Provider(e) => e.into(),
            AgentError::Transport(e) => e.into(),
            AgentError::Rejected(r) => Self::new(EXIT_REJECTED, format!("receiver rejected the request: {}", r.code())),
            AgentError::TokenRequestRejected(f) => Self::new(EXIT_REJECTED, format!("receiver refused the token request: {f}")),
            other => Self::failure(other.to_string()),
        }
    }
}
