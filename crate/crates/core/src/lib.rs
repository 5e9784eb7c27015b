pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod numeric;
pub mod profiler;
pub mod rope;
pub mod schedule;
pub mod trainer;

pub use error::{Error, ErrorClass, Result};
pub use model::{ModelConfig, ModelParams};
pub use numeric::{Graph, Tensor, Var};
