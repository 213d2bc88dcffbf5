//! Command line and HTTP front end for the resection simulator.

pub mod cli;
pub mod server;
