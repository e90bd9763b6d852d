//! Dense tensors, a reverse-mode tape and the two optimizers used for training.
//!
//! Everything here is generic over [`Real`], so the same code runs in `f32`
//! or `f64`. The rest of the crate uses the `f64` aliases exported from the
//! crate root.

mod conv;
mod graph;
mod optim;
mod params;
mod tensor;

pub use conv::{correlate_valid, pad_plane, Padding};
pub use graph::{Graph, Var};
pub use optim::{Adam, AdamConfig, Lbfgs, LbfgsConfig, LbfgsOutcome, OptimizerState};
pub use params::ParamSet;
pub use tensor::Tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating point scalar the engine is generic over.
pub trait Real:
    num_traits::Float
    + num_traits::FloatConst
    + num_traits::FromPrimitive
    + num_traits::NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`, used for literal constants.
    fn lit(v: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
}

macro_rules! impl_real {
    ($t:ty) => {
        impl Real for $t {
            #[inline]
            fn lit(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64_lossy(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_real!(f32);
impl_real!(f64);
