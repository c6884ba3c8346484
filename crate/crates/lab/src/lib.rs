//! File formats, configs, the experiment runner and the CLI behind the
//! `chamferlab` binary.

pub mod bench;
pub mod cli;
pub mod config;
pub mod io;
pub mod runner;
pub mod svg;
