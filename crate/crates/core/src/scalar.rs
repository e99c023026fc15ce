//! Floating-point abstraction for the continuous-time code.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive};

/// Scalar type usable by the kinetics integrator.
pub trait Real: Float + FromPrimitive + Debug + Display + Default + Send + Sync + 'static {
    /// Lossless for the small literals used in solver tableaus.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl<T> Real for T where T: Float + FromPrimitive + Debug + Display + Default + Send + Sync + 'static {}
