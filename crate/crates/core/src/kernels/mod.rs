//! Forward and backward kernels on flat row-major buffers.
//!
//! These are the numeric bodies behind the tape ops. Shapes are validated by
//! the tape before a kernel runs, so kernels only `debug_assert!`.

pub mod conv;
pub mod linalg;
pub mod norm;
pub mod pool;
pub mod softmax;
