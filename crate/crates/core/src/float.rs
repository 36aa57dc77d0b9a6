//! Scalar type used throughout the crate.
//!
//! Training runs in 32-bit floats. Enabling the `f64` feature switches every
//! tensor to 64-bit, which the gradient-check tests use for tight tolerances.

#[cfg(not(feature = "f64"))]
pub type Float = f32;
#[cfg(feature = "f64")]
pub type Float = f64;

#[cfg(not(feature = "f64"))]
mod imp {
    use super::Float;
    #[inline]
    pub fn exp(x: Float) -> Float {
        libm::expf(x)
    }
    #[inline]
    pub fn ln(x: Float) -> Float {
        libm::logf(x)
    }
    #[inline]
    pub fn sqrt(x: Float) -> Float {
        libm::sqrtf(x)
    }
    #[inline]
    pub fn cos(x: Float) -> Float {
        libm::cosf(x)
    }
    #[inline]
    pub fn sin(x: Float) -> Float {
        libm::sinf(x)
    }
    #[inline]
    pub fn floor(x: Float) -> Float {
        libm::floorf(x)
    }
    #[inline]
    pub fn round(x: Float) -> Float {
        libm::roundf(x)
    }
}

#[cfg(feature = "f64")]
mod imp {
    use super::Float;
    #[inline]
    pub fn exp(x: Float) -> Float {
        libm::exp(x)
    }
    #[inline]
    pub fn ln(x: Float) -> Float {
        libm::log(x)
    }
    #[inline]
    pub fn sqrt(x: Float) -> Float {
        libm::sqrt(x)
    }
    #[inline]
    pub fn cos(x: Float) -> Float {
        libm::cos(x)
    }
    #[inline]
    pub fn sin(x: Float) -> Float {
        libm::sin(x)
    }
    #[inline]
    pub fn floor(x: Float) -> Float {
        libm::floor(x)
    }
    #[inline]
    pub fn round(x: Float) -> Float {
        libm::round(x)
    }
}

pub use imp::*;

/// Euclidean norm of a slice, accumulated in f64.
pub fn norm(v: &[Float]) -> Float {
    libm::sqrt(v.iter().map(|&x| x as f64 * x as f64).sum()) as Float
}

/// Dot product of two equal-length slices, accumulated in f64.
#[inline]
pub fn dot(a: &[Float], b: &[Float]) -> Float {
    dot_f64(a, b) as Float
}

/// Unrounded f64 dot product.
#[inline]
pub fn dot_f64(a: &[Float], b: &[Float]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Sum of a slice, accumulated in f64.
pub fn sum(v: &[Float]) -> Float {
    v.iter().map(|&x| x as f64).sum::<f64>() as Float
}
