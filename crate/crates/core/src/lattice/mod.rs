//! Lattice geometry, truncated codebooks and subtractive dithered quantization.

mod codec;
mod dither;
mod generator;
mod moment;
mod truncated;

pub use codec::{recombine, split_vector, EncodedVector, SdqCodec, SplitVector};
pub use dither::DitherStream;
pub use generator::{GeneratorMatrix, MAX_DIM};
pub use moment::{
    fit_scale, overload_fraction, second_moment, MomentEstimate, ScaleFit, ScaleWarning, ZETA_MAX, ZETA_MIN,
};
pub use truncated::{
    count_points_up_to, rate_of, search_half_width, TruncatedLattice, BOUNDARY_REL_EPS, DEFAULT_ENUMERATION_CAP,
};

pub(crate) use truncated::within_radius;

/// Fixed two-dimensional reference lattices.
pub mod shapes {
    use super::GeneratorMatrix;

    pub fn hexagonal() -> GeneratorMatrix {
        GeneratorMatrix::new(2, vec![1.0, 0.5, 0.0, 3f64.sqrt() / 2.0]).expect("hexagonal basis")
    }

    // Entries are the customary four-digit values, not exact surds.
    #[allow(clippy::approx_constant)]
    pub fn a2() -> GeneratorMatrix {
        GeneratorMatrix::new(2, vec![2f64.sqrt(), 0.0, -0.7071, 1.2247]).expect("A2 basis")
    }

    pub fn d2() -> GeneratorMatrix {
        GeneratorMatrix::new(2, vec![2.0, 0.0, 1.0, -1.0]).expect("D2 basis")
    }

    pub fn square() -> GeneratorMatrix {
        GeneratorMatrix::identity(2)
    }
}
