//! Engine for building, training, and auditing densely connected convolutional
//! networks: a deterministic tensor/autodiff core, a declarative architecture
//! builder with preset and variant connectivities, explicit memory-allocation
//! planning with three strategies, closed-form cost accounting, and a
//! desk-scale training harness.

pub mod config;
pub mod cost;
pub mod data;
pub mod element;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod graph;
pub mod heatmap;
pub mod ops;
pub mod plan;
pub mod sweep;
pub mod tape;
pub mod tensor;
pub mod train;

mod par;

pub use element::Element;
pub use error::{Error, Result};
pub use tape::{BnState, Mode, NodeId, Tape};
pub use tensor::{Shape, Tensor, ViewInfo};
