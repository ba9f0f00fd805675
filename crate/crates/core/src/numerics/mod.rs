//! Dense tensors, reverse-mode differentiation, 2D FFT and the gradient
//! checker used by the tests.

pub mod fft;
pub mod gradcheck;
pub mod linalg;
pub mod tape;
pub mod tensor;

pub use fft::{fft2, ifft2, ComplexField, InverseField, RadialBands};
pub use gradcheck::{grad_check, GradReport};
pub use tape::{Gradients, SparseMap, Tape, Var};
pub use tensor::Tensor;
