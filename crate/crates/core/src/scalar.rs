//! Scalar abstraction for the core math.
//!
//! Everything numeric in the foundational modules (tape, SE(3), metrics,
//! nearest neighbor) is generic over [`Scalar`]; the pipeline instantiates it
//! at `f64` (see the aliases in the crate root).

use std::fmt::{Debug, Display};

pub trait Scalar:
    num_traits::Float + num_traits::NumAssignOps + Debug + Display + Default + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}
