//! Dense tensors, reverse-mode autodiff, radix-2 FFT and a finite-difference
//! gradient oracle.

mod conv;
pub mod fft;
pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod tensor;

pub use fft::{fft1d, ifft1d, next_pow2, Complex, ComplexVector, FftPlan};
pub use gradcheck::{grad_check, rel_err, GradCheckReport};
pub use graph::{half_len, CustomOp, Graph, Var};
pub use params::{Bound, ParamId, ParamStore};
pub use tensor::Tensor;
