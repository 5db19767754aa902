//! Hierarchical two-stage mask decoding on a small reverse-mode autodiff core.
//!
//! Everything here is `no_std` + `alloc`; file formats and the command line
//! live in the companion `hsam` crate.

#![no_std]

extern crate alloc;

mod error;
pub mod attention;
pub mod config;
pub mod data;
pub mod decoder;
pub mod lora;
pub mod loss;
pub mod math;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use rng::{Rng, Seed};
pub use tensor::{Tape, Tensor, Var};
