//! Domain types shared by every stage: volumes, masks, guidance, metrics
//! and file formats.

pub mod io;
pub mod metrics;
pub mod types;

pub use io::{load_volume, save_raw, VolumeFormat};
pub use metrics::{dsc, iou};
pub use types::*;
