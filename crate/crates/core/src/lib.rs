#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

//! GRPO and NoisyRollout on a synthetic visual counting task.
//!
//! Modules are layered bottom-up: [`raster`] and [`schedule`] feed the task
//! in [`env`], the differentiable [`policy`] is trained by [`grpo`], and
//! [`analysis`] post-processes runs.

pub mod error;
pub mod raster;
pub mod rng;
pub mod schedule;
pub mod env;
pub mod policy;
pub mod grpo;
pub mod analysis;
pub mod config;
pub mod experiment;

pub use error::{Error, Result};
