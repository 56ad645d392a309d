//! Shape-aware reconstruction of 3D volumes from sparse 2D slices.
//!
//! The library couples two pieces of machinery over a common set of field
//! types on regular 3D grids:
//!
//! * variational atlas (template) estimation under large-deformation
//!   diffeomorphic registration, driven by geodesic shooting of initial
//!   velocity fields, and
//! * a denoising diffusion process over those initial velocity fields,
//!   conditioned on the atlas and the observed slices, so that a
//!   reconstruction is always a deformation of the learned mean shape.
//!
//! All numerical code is generic over the scalar type via [`Scalar`];
//! `f64` is the default used by the CLI and the regression suite.

pub mod atlas;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod geodesic;
pub mod grid;
pub mod io;
pub mod metric;
pub mod metrics;
pub mod pipeline;
pub mod synth;

pub use error::{Error, Result};
pub use grid::{GridSpec, MatrixField, ScalarVolume, Transform, VectorField};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Floating-point scalar the field math is generic over: `f32` or `f64`.
pub trait Scalar:
    num_traits::Float
    + num_traits::FloatConst
    + num_traits::FromPrimitive
    + num_traits::NumAssign
    + rustfft::FftNum
    + Default
    + Send
    + Sync
    + 'static
{
    /// dtype tag used in the on-disk volume container (1 = f32, 2 = f64).
    const DTYPE: u32;

    fn of_f64(x: f64) -> Self;
    fn into_f64(self) -> f64;

    /// One standard-normal draw.
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

macro_rules! impl_scalar {
    ($t:ty, $dtype:expr) => {
        impl Scalar for $t {
            const DTYPE: u32 = $dtype;

            #[inline]
            fn of_f64(x: f64) -> Self {
                x as $t
            }

            #[inline]
            fn into_f64(self) -> f64 {
                self as f64
            }

            #[inline]
            fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
                <StandardNormal as Distribution<$t>>::sample(&StandardNormal, rng)
            }

            #[inline]
            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            #[inline]
            fn read_le(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("scalar byte width"))
            }
        }
    };
}

impl_scalar!(f32, 1);
impl_scalar!(f64, 2);

/// Concrete aliases for the common precisions.
pub type ScalarVolume32 = ScalarVolume<f32>;
pub type ScalarVolume64 = ScalarVolume<f64>;
pub type VectorField32 = VectorField<f32>;
pub type VectorField64 = VectorField<f64>;
pub type Transform32 = Transform<f32>;
pub type Transform64 = Transform<f64>;
