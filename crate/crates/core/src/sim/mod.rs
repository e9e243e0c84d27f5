//! Sidechain-level interaction modeling: normalizing flows over χ angles.

mod flow;
mod spline;

pub use flow::{residues_with_torsions, sim_loss, spline_graph, transformed_slots, FlowConfig, SidechainFlow, MAX_CHI};
pub use spline::{build_spline, derivative_shift, SplineParams, DEFAULT_BINS, LOG_BASE_DENSITY, MIN_BIN, MIN_DERIVATIVE};
