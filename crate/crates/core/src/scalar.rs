//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar usable by the aligner, the desk model and the concept engine.
///
/// Implemented for `f32` and `f64`. Reductions that feed comparisons
/// (cosines, losses, metrics) widen to `f64` through [`Scalar::to_f64_lossy`].
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to every supported scalar")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("supported scalars convert to f64")
    }

    fn from_count(v: usize) -> Self {
        Self::from_f64_lossy(v as f64)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
