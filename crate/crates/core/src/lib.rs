#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod curriculum;
pub mod error;
pub mod evalkit;
pub mod finecap;
pub mod models;
pub mod objectives;
pub mod patching;
pub mod real;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::{Graph, Tensor, Var};
