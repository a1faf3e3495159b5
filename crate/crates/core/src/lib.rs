//! Interactive volumetric segmentation with a quality-aware memory network.
//!
//! One annotated slice is segmented by an interaction network, propagated
//! through the volume by key-value memory reads, and each propagated slice
//! gets a predicted quality score that routes the user to the next slice.
//! Everything numeric is generic over `f32`/`f64` through [`Real`].

pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod evaluation;
pub mod interaction_net;
pub mod interaction_sim;
pub mod memory_net;
pub mod morphology;
pub mod nn;
pub mod rasterize;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Volume32 = data::Volume<f32>;
pub type Volume64 = data::Volume<f64>;
pub type SliceMask32 = data::SliceMask<f32>;
pub type SliceMask64 = data::SliceMask<f64>;
pub type InteractionNet32 = interaction_net::InteractionNet<f32>;
pub type InteractionNet64 = interaction_net::InteractionNet<f64>;
pub type MemoryNet32 = memory_net::MemoryNet<f32>;
pub type MemoryNet64 = memory_net::MemoryNet<f64>;
pub type Models32 = engine::Models<f32>;
pub type Models64 = engine::Models<f64>;
pub type Session32 = engine::Session<f32>;
pub type Session64 = engine::Session<f64>;
