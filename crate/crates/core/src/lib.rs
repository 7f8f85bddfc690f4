pub mod cli;
pub mod config;
pub mod error;
pub mod evalkit;
pub mod infer;
pub mod model;
pub mod numcodec;
pub mod synthgen;
pub mod textenc;
pub mod train;

pub use error::{Error, Result};
