//! Dense arrays, reverse-mode differentiation, and the optimiser state.

mod array;
mod graph;
mod optim;

pub use array::{rms_normalize, rms_normalize_rows, DenseArray};
pub use graph::{Gradients, Graph, Var};
pub use optim::{adamw_step, ema_update, AdamWConfig, EmaState, OptimizerState};

pub(crate) use array::{matmul, mean_square};

/// Stabiliser added to the mean square before RMS normalisation.
pub const RMS_EPS: f32 = 1e-6;
