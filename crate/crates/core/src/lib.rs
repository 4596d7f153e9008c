//! Desk-scale RGB-Event single-object tracker built on a density-adaptive
//! selective state space model.

pub mod error;
pub mod events;
pub mod fusion;
pub mod harness;
pub mod head;
pub mod numerics;
pub mod ssm;

pub use error::{Error, Result};
