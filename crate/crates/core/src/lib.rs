#[cfg(doctest)]
mod book;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod model;
pub mod objectives;
pub mod rundir;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
