//! Hybrid neural operators for parametric value functions of two-player
//! general-sum differential games with collision constraints.

pub mod bvp;
pub mod error;
pub mod game;
pub mod ntk;
pub mod operator;
pub mod pipeline;
pub mod rng;
pub mod rollout;
pub mod table;
pub mod training;

pub use error::{Error, Result};
