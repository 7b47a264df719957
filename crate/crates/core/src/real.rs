use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

/// Scalar element type for tensors.
///
/// Training runs in `f32` by default; verification suites (gradient checks,
/// attention degeneracy, label-propagation cross-checks) instantiate the same
/// code with `f64`, where finite differences are trustworthy.
pub trait Real:
    Float + num_traits::NumAssignOps + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Dtype tag used in checkpoint manifests and log lines.
    const DTYPE: &'static str;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Gauss error function, used by the exact GELU formulation.
    fn erf(self) -> Self;
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";

    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn erf(self) -> Self {
        libm::erf(self)
    }
}
