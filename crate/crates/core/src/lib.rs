//! Compact online handwritten character recognition: pen-trajectory
//! ingestion, distortion, path-signature feature maps, a small CNN engine,
//! and DropWeight pruning with codebook quantization and packed storage.

pub mod distort;
pub mod dropweight;
pub mod ink;
pub mod sig;
pub mod nn;
pub mod pack;
pub mod pipeline;
pub mod quant;
pub mod train;
pub mod zoo;
