//! Learned rolling-diffusion simulator for deformable solids.

pub mod ampn;
pub mod autodiff;
pub mod config;
pub mod container;
pub mod datagen;
pub mod diffusion;
pub mod error;
pub mod hierarchy;
pub mod mesh;
pub mod model;
pub mod pipeline;
pub mod robi;
pub mod rng;
pub mod stats;
pub mod training;

pub use error::{Error, Result};
