//! Library surface of the experiment runner, shared by the `gatlab` binary
//! and the verification suites.

pub mod config;
pub mod formats;
pub mod plots;
pub mod report;
pub mod runner;
