//! Minimal fixed-topology reverse-mode automatic differentiation.
//!
//! The pipeline topology never changes between training steps, so graphs are
//! built once (define-then-run) and executed repeatedly; randomness enters
//! only through input placeholders. Training runs in `f32`; gradient checking
//! re-instantiates the same graph code in `f64`.

pub mod checkpoint;
pub mod exec;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod tensor;
#[cfg(test)]
mod tests;

pub use checkpoint::TensorArchive;
pub use exec::{Executor, ParamStore};
pub use graph::{Graph, GraphBuilder, NodeRef, Padding};
pub use tensor::Tensor;

/// Floating-point scalar a graph can be instantiated over.
///
/// `f32` is the training width, `f64` the wide-precision width used by
/// finite-difference gradient checks.
pub trait Scalar:
    num_traits::Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn into_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn into_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn into_f64(self) -> f64 {
        self
    }
}
