use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating point scalar the whole toolkit is generic over.
///
/// Implemented by `f32` and `f64` through the blanket impl; nothing in the
/// crate names a concrete float type outside of tests and the CLI.
pub trait Real:
    Float + FromPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
}

impl<T> Real for T where
    T: Float + FromPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
}

/// Converts an `f64` literal into the working scalar type.
#[inline]
pub fn real<F: Real>(x: f64) -> F {
    F::from_f64(x).expect("literal must be representable in the scalar type")
}
