//! Command line and HTTP front ends for the segmentation engine.

pub mod api;
pub mod cli;
pub mod wire;
