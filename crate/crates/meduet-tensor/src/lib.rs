//! Reverse-mode automatic differentiation on a flat tape of `f64` matrices.
//!
//! Everything is an `ndarray::Array2<f64>`. Batch structure (pairs, views,
//! heads) is folded into the row dimension and unfolded by the few ops that
//! need to know about it (`attention`, `pool_rows`, `group_scores`, ...).
//! Scalars are 1x1 matrices.
//!
//! The tape is built once per training step, `backward` is called on a scalar
//! loss, and gradients are read back from parameter leaves. Nodes created via
//! [`Tape::constant`] never allocate gradient buffers; [`Tape::stop_gradient`]
//! cuts adjoint flow, so subgraphs behind it (e.g. a frozen teacher) cost
//! nothing in the backward sweep.
//!
//! Double precision only. The engine is single-threaded and allocation-order
//! deterministic: identical inputs produce bit-identical values and gradients.

mod gradcheck;
mod tape;

pub use gradcheck::{finite_diff_grad, max_rel_err};
pub use tape::{Tape, TensorId};
