//! Library surface of the CLI: pipeline stages and run records, kept as a
//! library so integration tests can drive full runs in-process.

pub mod pipeline;
pub mod records;
