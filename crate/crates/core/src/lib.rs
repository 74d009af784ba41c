//! Coordinate-aware CNN input mechanisms on a self-contained tensor and
//! reverse-mode autodiff engine, with a toy single-shot detector, synthetic
//! benchmarks, and training utilities for comparing the vanilla, coordinate
//! embedding, and coordinate channel variants.

pub mod conv;
pub mod coord_task;
pub mod detector;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod layers;
pub mod scenes;
pub mod ssd;
pub mod tensor;
pub mod training;

pub use conv::Padding;
pub use error::{Error, Result};
pub use graph::{ActivationOp, CeTarget, ElementwiseOp, Graph, LossOp, NodeId};
pub use layers::Variant;
pub use tensor::Tensor;
