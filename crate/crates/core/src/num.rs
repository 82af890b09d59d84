//! Scalar abstractions.
//!
//! Geometry, NMS, CAM and the detection metrics are written against these
//! traits rather than a concrete float, so the same code runs on `f32`,
//! `f64` and (for the metrics) exact rationals such as `BigRational`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, Num, ToPrimitive};

/// Ordered field with conversions from primitive integers.
///
/// Enough structure for precision, recall and average precision.
pub trait Scalar: Num + Clone + PartialOrd + FromPrimitive + Debug + Send + Sync {}

impl<T> Scalar for T where T: Num + Clone + PartialOrd + FromPrimitive + Debug + Send + Sync {}

/// Floating point scalar (`f32` or `f64`).
pub trait Real:
    Scalar
    + Float
    + FloatConst
    + ToPrimitive
    + Copy
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Display
    + Default
    + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Lossless-enough conversion from a primitive count.
#[inline]
pub fn from_usize<T: Scalar>(v: usize) -> T {
    T::from_usize(v).expect("count representable in scalar type")
}

/// Conversion from an `f64` literal.
#[inline]
pub fn lit<T: Real>(v: f64) -> T {
    T::from_f64(v).expect("literal representable in scalar type")
}

/// Sort key wrapper giving floats a total order (`f64::total_cmp` semantics).
#[inline]
pub fn total_cmp<T: Real>(a: T, b: T) -> std::cmp::Ordering {
    let (a, b) = (a.to_f64().unwrap_or(f64::NAN), b.to_f64().unwrap_or(f64::NAN));
    a.total_cmp(&b)
}
