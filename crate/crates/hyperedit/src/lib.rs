//! Files, checkpoints and the command line around `hyperedit-core`.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod models;
pub mod reports;

pub use hyperedit_core as core;
