//! Joint constituency and dependency parsing over a shared self-attention
//! encoder.

pub mod config;
pub mod constituent;
pub mod corpus;
pub mod dependency;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod treebank;
pub mod trainer;
pub mod trees;
pub mod vocab;

pub use error::{Error, Result};
