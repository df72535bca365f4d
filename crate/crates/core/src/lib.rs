pub mod alignment;
pub mod config;
mod codec;
pub mod engine;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod persist;
pub mod scenegen;
pub mod trainer;
pub mod transfer;

pub use error::{Error, Result};

#[cfg(test)]
mod testutil;
