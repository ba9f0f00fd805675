pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod energy;
pub mod matching;
pub mod model;
pub mod error;
pub mod numerics;
pub mod objective;
pub mod patching;
pub mod pipeline;
pub mod seed;

pub use error::{Error, Result};
pub use numerics::Tensor;
