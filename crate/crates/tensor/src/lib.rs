//! Numeric engine: dense f64 tensors, an iterative radix-2 FFT, linear 1-D
//! convolution with interchangeable naive/FFT backends, and a reverse-mode
//! autodiff tape whose ops cover embedding lookup, matrix algebra, masked
//! softmax attention, and channel-wise convolution of stacked walk matrices.
//!
//! Everything is f64. Tensors are immutable values (cheap to clone, the
//! buffer is shared); each forward pass records onto a fresh [`Tape`], so
//! tapes are never shared across threads.

mod conv;
mod fft;
pub mod gradcheck;
mod tape;
mod tensor;

pub use conv::{conv1d_fft, conv1d_fft_with_plan, conv1d_naive, conv_output_len, correlate, ConvBackend, ConvError};
pub use fft::{fft, ifft, FftError, FftPlan};
pub use tape::{backward, softmax_temp, Grad, Gradients, Tape, Var};
pub use tensor::{Tensor, TensorError};
