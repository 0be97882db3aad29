use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

/// Scalar type the engine computes in. Implemented for `f32` (default
/// compute precision) and `f64` (verification precision).
pub trait Real: Float + Debug + Display + Default + Sum + Send + Sync + 'static {
    const NAME: &'static str;

    /// Tolerance on softmax sums and similar simplex checks.
    const SIMPLEX_TOL: f64;

    fn of(x: f64) -> Self;

    fn to_f64(self) -> f64;
}

impl Real for f32 {
    const NAME: &'static str = "f32";
    const SIMPLEX_TOL: f64 = 1e-6;

    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";
    const SIMPLEX_TOL: f64 = 1e-12;

    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}
