//! File formats, checkpoints and the command-line workflow around
//! [`kpfc_core`].

pub mod checkpoint;
pub mod cli;
pub mod clips;
pub mod error;
pub mod infer;
pub mod report;

use std::time::Instant;

pub use error::{KpfcError, Result};

/// Monotonic wall clock, in seconds since construction.
#[derive(Debug, Clone, Copy)]
pub struct Monotonic(Instant);

impl Monotonic {
    pub fn new() -> Self {
        Self(Instant::now())
    }
}

impl Default for Monotonic {
    fn default() -> Self {
        Self::new()
    }
}

impl kpfc_core::training::Clock for Monotonic {
    fn now(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}
