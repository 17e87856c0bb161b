//! Long-video editing from sparse anchors.
//!
//! Anchor frames are inverted and edited jointly in overlapping pairs, with
//! shared frames averaged across pairs at every step. The frames between
//! consecutive edited anchors are then synthesized by two denoising
//! trajectories, one from each anchor, blended per frame. Classical vision
//! kernels supply the edge and motion controls and the consistency metrics.

pub mod anchor;
pub mod denoiser;
pub mod error;
pub mod fixtures;
pub mod interp;
pub mod io;
pub mod latent;
pub mod metrics;
pub mod pipeline;
pub mod schedule;
pub mod vision;

pub use error::{Error, Result};
pub use latent::LatentGrid;
pub use schedule::NoiseSchedule;
