//! Scalar abstraction shared by every numerical module.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating-point scalar the filters are generic over (`f32` or `f64`).
///
/// Elementary functions come from [`RealField`]; conversions go through
/// `num-traits`. Random draws are always produced in `f64` and narrowed with
/// [`Real::lit`], so a seed produces the same stream for every scalar type.
pub trait Real: RealField + Copy + FromPrimitive + ToPrimitive + Send + Sync + 'static {
    /// Converts an `f64` constant.
    #[inline(always)]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable")
    }

    #[inline(always)]
    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("finite scalar converts to f64")
    }

    #[inline(always)]
    fn from_usize_lossy(n: usize) -> Self {
        Self::lit(n as f64)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Nearest integer, ties rounded away from zero (`Round(4.5) = 5`).
pub fn round_half_away(x: f64) -> i64 {
    // f64::round already breaks ties away from zero.
    x.round() as i64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_go_away_from_zero() {
        assert_eq!(round_half_away(4.5), 5);
        assert_eq!(round_half_away(-4.5), -5);
        assert_eq!(round_half_away(4.49), 4);
        assert_eq!(round_half_away(2048.0), 2048);
    }

    #[test]
    fn lit_round_trips() {
        assert_eq!(f32::lit(0.5), 0.5f32);
        assert_eq!(f64::lit(0.1).as_f64(), 0.1);
    }
}
