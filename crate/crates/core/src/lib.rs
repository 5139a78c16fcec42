//! Iterative scene-text eraser.
//!
//! The crate covers the whole desk-scale pipeline: synthetic text scenes
//! with per-instance masks ([`synth`]), the recurrent erasing network
//! ([`model`]), multi-iteration training and ablations ([`training`]),
//! image-quality metrics ([`metrics`]) and checkpoint / image I/O.

pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod synth;
pub mod tensor;
pub mod training;
pub mod viz;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use tensor::{Float, Tensor};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/synthetic-data.md")]
    pub struct SyntheticData;
    #[doc = include_str!("../../../book/src/model.md")]
    pub struct TheNetwork;
    #[doc = include_str!("../../../book/src/training.md")]
    pub struct Training;
    #[doc = include_str!("../../../book/src/metrics.md")]
    pub struct Metrics;
    #[doc = include_str!("../../../book/src/checkpoints.md")]
    pub struct Checkpoints;
    #[doc = include_str!("../../../book/src/cli.md")]
    pub struct CommandLine;
    #[doc = include_str!("../../../book/src/serve.md")]
    pub struct HttpService;
}
