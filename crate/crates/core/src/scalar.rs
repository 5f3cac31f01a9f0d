//! Scalar abstraction shared by the numerical core.
//!
//! Estimating equations, likelihoods and the small dense linear algebra are
//! written against [`Real`] so they run in `f32` or `f64`. Data ingestion,
//! simulation and study orchestration work in `f64` only.

use num_traits::{Float, FromPrimitive, NumAssign};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point type usable by the estimators.
pub trait Real:
    Float + FromPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal. Every `Real` can represent (a rounding of) any finite `f64`.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }

    /// Lossy conversion to `f64` for reporting.
    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Default absolute tolerance for score-norm convergence tests. Single
    /// precision cannot resolve scores down to 1e-8, so the floor scales with
    /// machine epsilon.
    #[inline]
    fn default_tolerance(requested: f64) -> Self {
        let floor = Self::epsilon().as_f64() * 1e4;
        Self::lit(requested.max(floor))
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Logistic function `1 / (1 + exp(-x))`, evaluated without overflow.
#[inline]
pub fn expit<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log(1 + exp(x))` without overflow.
#[inline]
pub fn log1p_exp<T: Real>(x: T) -> T {
    if x > T::lit(30.0) {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}
