//! Disentangling multimodal segmentation network.

mod blocks;
mod config;
mod mask;
mod network;

pub use config::{FusionKind, NetworkConfig};
pub use mask::{sample_modality_mask, ModalityMask, MODALITY_NAMES};
pub use network::{AppearanceCode, ContentPyramid, ForwardOutput, GatedFusionOutput, Network};
