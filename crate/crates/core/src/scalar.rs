use num_traits::{Float, FloatConst, FromPrimitive, NumAssign};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Working floating-point scalar (`f32` or `f64`).
///
/// Everything numeric in this crate is generic over `Scalar` so the
/// same code path can run fast in single precision and be verified
/// against finite differences in double precision.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + NumAssign
    + rustfft::FftNum
    + Default
    + std::fmt::Display
    + std::fmt::LowerExp
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` constant. Panics only if the
    /// target type cannot represent the value class at all, which
    /// never happens for finite literals on f32/f64.
    fn from_f64_c(v: f64) -> Self {
        Self::from_f64(v).expect("finite constant")
    }

    fn to_f64_c(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }

    /// One standard-normal draw from the given generator.
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

impl Scalar for f32 {
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}

impl Scalar for f64 {
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}
