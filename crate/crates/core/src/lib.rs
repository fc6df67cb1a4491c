//! Core library of the condenser-forge toolkit: tensor autodiff, attention
//! condenser building blocks, an architecture DSL with exact cost accounting,
//! constrained design exploration, a synthetic light-guide-plate dataset
//! generator, and training/evaluation harnesses.

pub mod blocks;
pub mod constraints;
pub mod cost;
pub mod data;
pub mod dsl;
pub mod error;
pub mod explore;
pub mod graph;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod weights_io;

pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;
