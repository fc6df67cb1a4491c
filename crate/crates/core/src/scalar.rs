//! Scalar abstraction over the two supported element types.
//!
//! Everything runs in `f32` by default; gradient-check builds instantiate the
//! same code in `f64` so central finite differences have enough headroom.

use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Element type identifier, used by the weights file and reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

/// Floating-point element of a [`crate::tensor::Tensor`].
pub trait Scalar:
    num_traits::Float + num_traits::FromPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    const DTYPE: Dtype;

    /// Lossy conversion from `f64`; literals and RNG draws go through here so
    /// that an `f32` model is exactly the rounded `f64` model.
    fn fromf(v: f64) -> Self {
        num_traits::cast(v).expect("finite f64 converts to any Scalar")
    }

    fn tof(self) -> f64 {
        num_traits::cast(self).expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
}
