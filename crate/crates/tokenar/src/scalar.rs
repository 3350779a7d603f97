//! Element type abstraction for the numeric kernels.
//!
//! All model math is generic over [`Real`] so the same code runs in f32 for
//! training speed and in f64 when tests need tight finite-difference bounds.

use std::fmt;

use num_traits::Float;
use serde::{Deserialize, Serialize};

pub trait Real: Float + Send + Sync + fmt::Debug + fmt::Display + 'static {
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline(always)]
    fn of(x: f64) -> f32 {
        x as f32
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline(always)]
    fn of(x: f64) -> f64 {
        x
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Float width selector used by configs and the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FloatWidth {
    #[default]
    F32,
    F64,
}
