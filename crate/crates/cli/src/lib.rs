//! Shared pieces of the command-line binary, exposed for its tests.

pub mod dump;
