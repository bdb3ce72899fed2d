//! Full networks: extraction (with optional IPD input), the two-output
//! separation baseline, and their checkpoint format.

mod checkpoint;
mod config;
mod network;

pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use config::{IpdMode, ModelKind, TopologyConfig};
pub use network::{adaptation_layer, EmbeddingVector, ForwardOutput, Model, Stage};
