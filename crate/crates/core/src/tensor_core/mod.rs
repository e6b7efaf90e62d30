//! Dense tensors and reverse-mode automatic differentiation.

pub mod gradcheck;
pub mod ops;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_many, GradCheckReport};
pub use ops::{reduce_sum, ElementwiseOp, Operand};
pub use scalar::Scalar;
pub use tape::{Backward, Gradients, Tape, Var};
pub use tensor::Tensor;
