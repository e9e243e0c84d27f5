//! Multi-level interaction pre-training for protein mutational effect
//! (ΔΔG) prediction.

pub mod bim;
pub mod dataio;
pub mod ddg;
pub mod encoder;
pub mod error;
pub mod featurize;
pub mod geometry;
pub mod metrics;
pub mod nn;
pub mod pim;
pub mod pretrain;
pub mod residue;
pub mod runlog;
pub mod sim;
pub mod synth;
pub mod tensor;
pub mod workflow;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/workflows.md")]
    mod workflows {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    mod geometry {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/pretraining.md")]
    mod pretraining {}
    #[doc = include_str!("../../../book/src/ddg.md")]
    mod ddg {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
}
