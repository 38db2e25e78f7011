//! Desk-scale privacy unlearning laboratory.

pub mod analysis;
pub mod attack;
pub mod corpus;
pub mod error;
pub mod lm;
pub mod pipeline;
pub mod tensor;
pub mod tokenizer;
pub mod unlearn;

pub use error::{Error, Result};
