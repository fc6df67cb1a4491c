//! Raw numeric kernels behind the tape ops.
//!
//! Each kernel is a pure function over flat slices plus explicit dimensions;
//! the tape wires them to recorded nodes. Loop order is fixed, so results are
//! bit-identical across runs.

pub mod act;
pub mod conv;
pub mod elementwise;
pub mod linear;
pub mod norm;
pub mod pool;
pub mod resample;
