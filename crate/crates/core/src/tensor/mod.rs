//! Differentiable computation substrate: dense tensors, a define-by-run graph
//! with reverse-mode gradients, Adam, and the checkpoint container.

mod adam;
pub mod checkpoint;
pub mod gradcheck;
mod dense;
mod graph;
mod params;

pub use adam::{lr_schedule, AdamState, PlateauSchedule};
pub use dense::Tensor;
pub use graph::{FrameSet, Gradients, Graph, NodeId};
pub use params::{seeded_rng, ParamStore, Rng64};
