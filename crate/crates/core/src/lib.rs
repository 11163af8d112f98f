//! Few-shot intent classification data augmentation: prompt a completion
//! model with seed utterances, then measure, filter, relabel and benchmark
//! what it generates.

pub mod augment;
pub mod classify;
pub mod corpus;
pub mod eda;
pub mod error;
pub mod filter;
pub mod harness;
pub mod lm;
pub mod prompting;
pub mod review;
pub mod synthetic;
pub mod util;

pub use error::{Error, Result};
