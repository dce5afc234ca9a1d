//! Dense f64 tensors and a define-by-run reverse-mode tape.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, REL_ERROR_FLOOR};
pub use tape::{attention, Gradients, NodeId, Tape, Var};
pub use tensor::{
    activation, add_row, concat_rows, layer_norm, linear, matmul, normalize_rows, softmax,
    Activation, AttentionLayout, Tensor,
};
