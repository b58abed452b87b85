//! Doubly-nonparametric generalized additive models.

pub mod basis;
pub mod cli_io;
pub mod diagnostics;
pub mod dnp;
pub mod error;
pub mod gam;
pub mod harness;
pub mod linalg;
pub mod link;
pub mod simulation;
pub mod tilt;

pub use error::{Error, Result};
