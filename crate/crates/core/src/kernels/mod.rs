//! Numeric kernels shared by the tape and by eval-only forward paths.

pub mod conv;
pub mod head;
pub mod norm;
pub mod pool;
