//! Dense tensors, a reverse-mode tape, finite-difference checking and the
//! binary tensor format used by checkpoints.

mod gradcheck;
mod graph;
mod io;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, REL_ERROR_FLOOR};
pub use graph::{axis_weights, resize_bilinear, AttentionProbs, Graph, Var};
pub use io::{decode_tensor, encode_tensor, read_tensor, write_tensor, TENSOR_MAGIC};
pub use tensor::{DType, Element, Tensor};
