use thiserror::Error;

use crate::allocator::AllocError;
use crate::metrics::MetricsError;
use crate::policy::PolicyError;
use crate::replay::ReplayError;
use crate::trace::TraceError;

/// Coarse classification used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// The requested configuration cannot be satisfied.
    Config,
    /// Reading or writing a file failed, or its contents are malformed.
    Io,
    /// An internal invariant was violated.
    Invariant,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Trace(e) => e.class(),
            Error::Policy(e) => e.class(),
            Error::Alloc(_) => ErrorClass::Config,
            Error::Replay(e) => e.class(),
            Error::Metrics(e) => e.class(),
        }
    }
}
