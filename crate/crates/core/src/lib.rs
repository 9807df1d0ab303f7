//! Robust multimodal volumetric segmentation.
//!
//! Each input modality is encoded into a multi-scale content pyramid and a
//! small appearance code. Content codes are merged stage by stage with a
//! learned voxel-wise gate, with whole modalities randomly dropped in latent
//! space during training so the fused representation tolerates missing
//! inputs at inference. A segmentation decoder reads the fused pyramid and
//! per-modality decoders reconstruct every input from the deepest fused code
//! plus that modality's appearance code.

pub mod autodiff;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
