//! Adaptive and passive batch-size schedules for mini-batch SGD, with the
//! problems, diagnostics and analysis needed to compare them.

pub mod analysis;
pub mod diagnostics;
pub mod engine;
mod error;
pub mod problems;
pub mod schedules;

pub use error::{Error, Result};
