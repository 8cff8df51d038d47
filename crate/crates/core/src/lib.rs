#![cfg_attr(not(feature = "std"), no_std)]
#![allow(clippy::needless_range_loop, clippy::too_many_arguments)]

extern crate alloc;

pub mod comparator;
pub mod error;
pub mod fid;
pub mod gan;
pub mod inversion;
pub mod mesh;
pub mod nn;
pub mod optim;
pub mod optimize;
pub mod params;
pub mod real;
pub mod shapegen;
pub mod voxel;

pub use error::{Error, Result};
pub use real::Real;
