//! Command implementations behind the `bst` binary, exposed as a library so
//! integration tests can drive them in-process.

pub mod bench;
pub mod config;
pub mod gridcmd;
pub mod memreport;
pub mod overhead;
pub mod runner;
pub mod traincmd;
