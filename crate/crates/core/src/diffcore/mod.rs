//! Minimal reverse-mode differentiation over dense row-major arrays.
//!
//! A [`Tape`] evaluates each primitive eagerly and records it; [`Tape::backward`]
//! walks the record in reverse to fill in gradients. Tapes own all their state,
//! so independent tapes can be driven from different threads.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{column_moments, NodeId, Primitive, Tape, L2_NORM_EPS};
pub(crate) use tape::logsumexp;
pub use tensor::TensorBuf;

#[cfg(test)]
mod tests;
