//! Physics-informed transformer training with residual-guided adversarial
//! collocation sampling.
//!
//! The numeric core ([`numcore`]) is generic over the scalar type; the
//! aliases below fix it to `f64`, which is what every other module uses.

pub mod error;
pub mod fdops;
pub mod field;
pub mod harness;
pub mod losses;
pub mod model;
pub mod numcore;
pub mod problems;
pub mod refsolve;
pub mod sampler;

pub use error::{Error, Result};

pub type Tensor = numcore::Tensor<f64>;
pub type Graph = numcore::Graph<f64>;
pub type ParamSet = numcore::ParamSet<f64>;
pub type Padding = numcore::Padding<f64>;
pub use numcore::Var;
