//! Minimal reverse-mode tensor engine.
//!
//! A [`Tape`] records every intermediate value together with a backward
//! closure; [`Tape::backward`] replays the records in reverse to accumulate
//! gradients. The operation set is exactly what the network needs:
//! broadcast elementwise arithmetic, activations, axis movement,
//! reductions, contractions, batched matrix multiplication, softmax, a
//! fused memory-bounded attention kernel, and a differentiable symmetric
//! eigendecomposition. [`grad_check`] verifies any scalar-valued graph
//! against central finite differences.

mod eig;
mod gradcheck;
mod ops;
mod params;
mod tape;

pub use eig::{eig_values, eig_vectors, eigh, sym_eig_packed};
pub use gradcheck::grad_check;
pub use ops::{concat, layer_norm, scaled_dot_attention};
pub use params::{simplex_sub_one, Constraint, ParamEntry, ParamStore};
pub use tape::{Gradients, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DiffError {
    #[error(
        "eigendecomposition did not converge after {sweeps} sweeps \
         (off-diagonal norm {off_norm:.3e})"
    )]
    EigNonConvergence { sweeps: usize, off_norm: f64 },
    #[error("eigendecomposition input contains non-finite entries")]
    EigNonFiniteInput,
}

/// Scalar type the engine is generic over. `f64` is the default for all
/// property tests; `f32` trades precision for training speed.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::NumAssignOps
    + ndarray::ScalarOperand
    + ndarray::LinalgScalar
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Name used in serialized headers.
    const DTYPE: &'static str;

    fn cast(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";

    fn cast(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";

    fn cast(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        f64::from(self)
    }
}
