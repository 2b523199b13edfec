//! Parameter-free differentiable pruning on a minimal training stack.
//!
//! Soft pruning masks are computed directly from the weights: a per-layer
//! threshold abstracts the current magnitude distribution, a temperature
//! controls mask sharpness, and the masked forward stays differentiable so
//! pruning decisions keep flipping while training. Unstructured, N:M, and
//! channel granularities share the same threshold machinery.

pub mod harness;
pub mod mask;
pub mod schedule;
pub mod structured;
pub mod tensor;

pub use mask::{MaskError, MaskParams, PruneMode};
pub use tensor::{Graph, LrSchedule, Sgd, Tensor, TensorError, VarId};
