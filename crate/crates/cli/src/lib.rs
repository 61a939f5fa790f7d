//! Command line and HTTP front ends for the oodsim world model.

pub mod api;
pub mod cli;
pub mod server;

pub use cli::run;
