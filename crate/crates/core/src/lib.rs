//! Restoration of images under mixed, parameterized degradations.
//!
//! The crate is organized as a pipeline:
//!
//! 1. [`degrade`] synthesizes degraded/clean training pairs with recorded,
//!    replayable parameter specs.
//! 2. [`features`] extracts a compact degradation descriptor from a degraded
//!    image alone.
//! 3. [`cluster`] groups descriptors into a nested multi-granularity tree.
//! 4. [`experts`] fits one small residual restorer per tree node.
//! 5. [`router`] estimates a descriptor and its own uncertainty from the
//!    input, then gates between granularity levels of the matching expert
//!    chain.
//! 6. [`pipeline`] wires the stages into resumable commands behind the CLI.
//!
//! All randomness is seeded and all stages are deterministic for a fixed
//! configuration, including under data parallelism.

pub mod cluster;
pub mod degrade;
pub mod experts;
pub mod features;
pub mod filters;
pub mod image;
pub mod nn;
pub mod pipeline;
pub mod procgen;
pub mod router;
pub mod seeds;

pub use crate::image::Image;
