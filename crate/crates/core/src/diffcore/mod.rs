//! Dense-matrix compute core: tensors, a reverse-mode tape, and Adam.

mod adam;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use tape::{backward, evaluate, forward, gradients, Bindings, Evaluation, NodeId, Op, Tape};
pub use tensor::{Real, Tensor2};

/// Named parameter tensors, ordered by name.
pub type ParamSet<T> = std::collections::BTreeMap<String, Tensor2<T>>;
