//! File formats, checkpoints, configuration and the staged pipeline built on
//! `voxopt-core`.

#![allow(clippy::too_many_arguments)]

pub mod checkpoint;
pub mod config;
pub mod latent;
pub mod manifest;
pub mod pipeline;
pub mod render;
pub mod voxb;
