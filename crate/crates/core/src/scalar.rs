use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar the whole engine is generic over.
///
/// Training runs with `f32`; gradient checks and the numeric oracles
/// run with `f64`. Randomness is always drawn in `f64` and converted,
/// so both instantiations consume identical rng streams.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + std::fmt::Debug + std::fmt::Display + Default + Send + Sync + 'static
{
    fn from_f(x: f64) -> Self {
        Self::from_f64(x).expect("f64 conversion")
    }

    fn to_f(self) -> f64 {
        self.to_f64().expect("f64 conversion")
    }

    fn from_us(x: usize) -> Self {
        Self::from_usize(x).expect("usize conversion")
    }
}

impl<T> Scalar for T where
    T: Float
        + FromPrimitive
        + ToPrimitive
        + std::fmt::Debug
        + std::fmt::Display
        + Default
        + Send
        + Sync
        + 'static
{
}
