//! Scalar abstraction shared by every numeric routine in the crate.

use nalgebra as na;
use num_traits as nt;

/// Real floating-point scalar usable by the estimators (`f32` or `f64`).
///
/// Arithmetic and elementary functions come from [`na::RealField`];
/// conversions to and from `f64` literals come from `num-traits`.
pub trait Real: na::RealField + Copy + nt::FromPrimitive + nt::ToPrimitive {
    /// Machine epsilon of the concrete type.
    const EPSILON: Self;
}

impl Real for f32 {
    const EPSILON: Self = f32::EPSILON;
}

impl Real for f64 {
    const EPSILON: Self = f64::EPSILON;
}

/// Converts an `f64` constant into `T`.
#[inline]
pub fn lit<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("f64 literal representable in scalar type")
}

/// Converts a count into `T`.
#[inline]
pub fn count<T: Real>(n: usize) -> T {
    T::from_usize(n).expect("count representable in scalar type")
}

/// Lossy view of `x` as `f64`.
#[inline]
pub fn to_f64<T: Real>(x: T) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}
