//! Dense tensors with reverse-mode gradients plus the handful of neural
//! primitives the model needs: linear maps, 7x7 convolution, instance
//! normalization, GRU-building elementwise ops, dropout, Adam, and a
//! finite-difference gradient checker.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod gru;
mod kernels;
pub mod params;
pub mod precision;
pub mod rng;
pub mod sparse;
pub mod tape;
pub mod tensor;

pub use adam::Adam;
pub use gradcheck::{grad_check, GradCheckReport};
pub use params::{ParamKind, ParamSet};
pub use precision::{precision, set_precision, Precision};
pub use sparse::SparseMatrix;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
