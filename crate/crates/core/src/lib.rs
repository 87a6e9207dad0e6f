#![cfg_attr(not(feature = "std"), no_std)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod autodiff;
pub mod bench;
pub mod dataset;
pub mod envelope;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod scalar;
pub mod synthgen;
pub mod tensor;
pub mod training;

pub use autodiff::{Graph, Mode, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
