//! Seeded randomness.
//!
//! Every random draw in the crate comes from a [`ChaCha8Rng`] seeded from a
//! counter tuple, so results are independent of call order and threading.

use crate::float::{self, Float};
use rand::{Rng, SeedableRng};
pub use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash an ordered tuple of counters into one seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5EED_5EED_5EED_5EED_u64, |acc, &p| mix64(acc ^ mix64(p)))
}

pub fn rng_for(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}

/// Standard normal sample (Box-Muller).
pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> Float {
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen::<f64>();
    let r = libm::sqrt(-2.0 * libm::log(u1));
    (r * libm::cos(core::f64::consts::TAU * u2)) as Float
}

/// Uniform sample in `[lo, hi)`.
pub fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: Float, hi: Float) -> Float {
    if hi <= lo {
        return lo;
    }
    lo + (hi - lo) * (rng.gen::<f64>() as Float)
}

/// Unit vector drawn uniformly from the sphere.
pub fn unit_vector<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> alloc::vec::Vec<Float> {
    loop {
        let v: alloc::vec::Vec<Float> = (0..dim).map(|_| normal(rng)).collect();
        let n = float::norm(&v);
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}
