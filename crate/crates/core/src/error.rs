use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Permission;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Error {
    #[error("permission denied: `{0}` required")]
    PermissionDenied(Permission),
    #[error("forbidden: {0}")]
    Forbidden(String),
    #[error("not authenticated: {0}")]
    Unauthenticated(String),
    #[error("{what} `{id}` not found")]
    NotFound { what: &'static str, id: String },
    #[error("{0}")]
    Conflict(String),
    #[error("{path}: {message}")]
    Validation { path: String, message: String },
    #[error("membership violation: {0}")]
    Membership(String),
    #[error("room `{0}` is read-only")]
    ReadOnly(String),
    #[error("rate limited: {0}")]
    RateLimited(String),
    #[error("storage failure: {0}")]
    Storage(String),
    #[error("internal ordering fault: {0}")]
    Ordering(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn not_found(what: &'static str, id: impl ToString) -> Self {
        Error::NotFound { what, id: id.to_string() }
    }

    pub fn validation(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation { path: path.into(), message: message.into() }
    }

    pub fn code(&self) -> &'static str {
        match self {
            Error::PermissionDenied(_) => "permission_denied",
            Error::Forbidden(_) => "forbidden",
            Error::Unauthenticated(_) => "unauthenticated",
            Error::NotFound { .. } => "not_found",
            Error::Conflict(_) => "conflict",
            Error::Validation { .. } => "validation",
            Error::Membership(_) => "membership_violation",
            Error::ReadOnly(_) => "read_only",
            Error::RateLimited(_) => "rate_limited",
            Error::Storage(_) => "storage",
            Error::Ordering(_) => "ordering_fault",
        }
    }

    /// HTTP status class for REST responses.
    pub fn status(&self) -> u16 {
        match self {
            Error::PermissionDenied(_) | Error::Forbidden(_) => 403,
            Error::Unauthenticated(_) => 401,
            Error::NotFound { .. } => 404,
            Error::Conflict(_) | Error::Membership(_) | Error::ReadOnly(_) => 409,
            Error::Validation { .. } => 422,
            Error::RateLimited(_) => 429,
            Error::Storage(_) | Error::Ordering(_) => 500,
        }
    }

    pub fn body(&self) -> ErrorBody {
        ErrorBody {
            code: self.code().to_string(),
            message: self.to_string(),
            path: match self {
                Error::Validation { path, .. } => Some(path.clone()),
                _ => None,
            },
        }
    }
}

impl From<rusqlite::Error> for Error {
    fn from(e: rusqlite::Error) -> Self {
        Error::Storage(e.to_string())
    }
}

/// Error document carried by REST error responses and failed receipts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    #[serde(default)]
    pub path: Option<String>,
}
