//! Tensor arithmetic and reverse-mode differentiation.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::finite_diff_check;
pub use tape::{attention_probabilities, Gradients, SeqLayout, Tape, Var};
pub use tensor::{softmax_rows, DType, Element, Tensor};
