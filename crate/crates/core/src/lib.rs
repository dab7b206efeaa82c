pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod rl;
pub mod rollout;
pub mod seed;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
