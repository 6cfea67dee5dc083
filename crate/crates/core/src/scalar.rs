//! Scalar abstraction shared by the numerical core.
//!
//! Everything below the Monte Carlo harness is written against [`Scalar`],
//! which is implemented for `f32` and `f64`. The structural tolerances scale
//! with the precision of the type.

use std::fmt::{Debug, Display};

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating point type usable by the models, samplers and matchers.
pub trait Scalar:
    RealField + Copy + FromPrimitive + ToPrimitive + Default + Display + Debug + Send + Sync + 'static
{
    /// Relative tolerance for structural checks on exact inputs
    /// (proportionality, collinearity, canonical residuals).
    const STRUCTURAL_TOL: f64;
    /// Tolerance for floating round trips.
    const ROUNDTRIP_TOL: f64;

    /// Converts an `f64` literal into this type.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("count representable")
    }

    /// Largest finite value, used as a sentinel in assignment searches.
    #[inline]
    fn huge() -> Self {
        Self::max_value().expect("bounded real type")
    }
}

macro_rules! impl_scalar {
    ($t:ty, $structural:expr, $roundtrip:expr) => {
        impl Scalar for $t {
            const STRUCTURAL_TOL: f64 = $structural;
            const ROUNDTRIP_TOL: f64 = $roundtrip;
        }
    };
}

impl_scalar!(f64, 1e-8, 1e-10);
impl_scalar!(f32, 1e-4, 1e-5);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn literals_round_trip() {
        assert_eq!(<f64 as Scalar>::lit(0.25), 0.25);
        assert_eq!(<f32 as Scalar>::lit(0.25), 0.25f32);
        assert_eq!(2.5f32.as_f64(), 2.5);
        assert!(f64::huge() > 1e300);
    }
}
