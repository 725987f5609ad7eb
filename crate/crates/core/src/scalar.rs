//! Scalar abstraction over the two supported element types.
//!
//! Verification and reproducibility runs use `f64`; training defaults to
//! `f32`. Everything downstream is generic over [`Real`] so the same code
//! path serves both modes.

use std::fmt;

/// Element type of tensors: `f32` in train mode, `f64` in test mode.
pub trait Real:
    num_traits::Float
    + num_traits::NumAssignOps
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
