//! Trainable product-key memory layers.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors, kernels and a tape autograd.
//! * [`pk_index`]: exact top-k search over a product of two half-key tables.
//! * [`embedding_bag`]: weighted row-sum forward and three sparse backward strategies.
//! * [`memory_layer`]: the memory lookup, the gated `Memory+` block and shared pools.
//! * [`sharded_memory`]: a simulated memory group sharding values by dimension.
//! * [`trainer`]: a toy transformer, synthetic fact recall and sparse Adam.
//! * [`verify`]: exhaustive top-k and sharding checks.
//! * [`cli`]: the `pkmem` command line.

pub mod cli;
pub mod embedding_bag;
pub mod error;
pub mod memory_layer;
pub(crate) mod parallel;
pub mod pk_index;
pub mod sharded_memory;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
