//! The floating-point element type every numeric routine is generic over.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};
use rand::Rng as _;
use rand_chacha::ChaCha8Rng;

pub trait Scalar: Float + FromPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static {
    /// Size of one element in bytes, used by buffer accounting.
    const BYTES: usize;

    /// Lossless for `f64`, nearest-rounding for `f32`.
    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// Uniform sample in `[lo, hi)`, drawn natively in this precision.
    fn sample_uniform(rng: &mut ChaCha8Rng, lo: Self, hi: Self) -> Self;
}

macro_rules! impl_scalar {
    ($($t:ty),*) => {$(
        impl Scalar for $t {
            const BYTES: usize = std::mem::size_of::<$t>();

            #[inline]
            fn of(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            #[inline]
            fn sample_uniform(rng: &mut ChaCha8Rng, lo: Self, hi: Self) -> Self {
                rng.random_range(lo..hi)
            }
        }
    )*};
}

impl_scalar!(f32, f64);
