//! Primitive compute kernels.
//!
//! Kernels are pure functions over slices. Wherever possible they take one
//! batch element's contiguous channel slab, which lets the executor run them
//! over disjoint regions of shared buffers (and in parallel across the batch)
//! without copies.

pub mod conv;
pub mod head;
pub mod misc;
pub mod norm;
pub mod pool;
