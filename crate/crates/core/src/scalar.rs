//! Scalar abstraction for scores, rates and coverage ratios.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{de::DeserializeOwned, Serialize};

/// Real scalar used by scoring, rates and coverage: `f32` or `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Absolute tolerance used for weight-sum and convexity checks.
    fn weight_tolerance() -> Self;

    fn from_ratio(num: usize, den: usize) -> Self {
        Self::from_usize(num).unwrap() / Self::from_usize(den).unwrap()
    }

    fn lit(v: f64) -> Self {
        Self::from_f64(v).unwrap()
    }
}

impl Real for f64 {
    fn weight_tolerance() -> Self {
        1e-9
    }
}

impl Real for f32 {
    // 1e-9 is below f32 resolution around 1.0.
    fn weight_tolerance() -> Self {
        1e-6
    }
}
