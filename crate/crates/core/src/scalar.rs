//! Scalar abstraction shared by the differentiation engine, the losses, the
//! network and the detection metrics.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar the numeric core is generic over (`f32` or `f64`).
///
/// Gradient checks and the training pipeline run in `f64`; `f32` is supported
/// for inference-style use where the relaxed precision is acceptable.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + NumAssign + Debug + Display + Default + Send + Sync + 'static
{
    /// Short tag written into checkpoint headers.
    const NAME: &'static str;

    /// Converts a literal constant; every `f64` is representable up to rounding.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";
}

impl Real for f32 {
    const NAME: &'static str = "f32";
}
