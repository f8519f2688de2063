//! Out-of-distribution detection by training a classifier with an extra
//! "garbage" class, inverting it with a conditional generator, and excluding
//! uncertain inversions from the next round of training.
//!
//! The crate is self-contained: [`diffcore`] provides the tensor type,
//! reverse-mode autodiff tape, layers and Adam; everything else builds on it.

pub mod data;
pub mod diffcore;
pub mod error;
pub mod experiment;
pub mod inversion;
pub mod metrics;
pub mod models;
pub mod oodscores;
pub mod rng;
pub mod tieloop;

pub use error::{Error, Result};
