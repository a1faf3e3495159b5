pub mod synthetic;
pub mod memory;
pub mod interaction;
pub mod quality;
pub mod pipeline;
