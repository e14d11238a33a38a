//! Hash-routed mixture-of-experts language-model laboratory.

pub mod analysis;
pub mod corpus;
pub mod error;
pub mod hashing;
pub mod model;
pub mod trainer;

pub use error::{Error, Result};
