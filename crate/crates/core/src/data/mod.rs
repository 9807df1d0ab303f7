//! Synthetic multimodal cases: generation, preprocessing and the on-disk format.

mod manifest;
mod mmvc;
mod phantom;
mod prep;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use manifest::{read_manifest, write_manifest};
pub use mmvc::{decode_case, encode_case, read_case, write_case, MMVC_MAGIC, MMVC_VERSION};
pub use phantom::{case_seed, synth_case, PhantomConfig, CLASSES};
pub use prep::{crop_patch, normalize, normalize_case, CROP_ATTEMPTS, TUMOR_SEEKING_SHARE};

/// Nested tumor regions scored at evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Region {
    /// Labels 1, 2 and 3.
    Complete,
    /// Labels 2 and 3.
    Core,
    /// Label 3.
    Enhancing,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Complete, Region::Core, Region::Enhancing];

    pub fn name(self) -> &'static str {
        match self {
            Region::Complete => "complete",
            Region::Core => "core",
            Region::Enhancing => "enhancing",
        }
    }

    /// Smallest label in the region; membership is `label >= min_label`.
    pub fn min_label(self) -> u8 {
        match self {
            Region::Complete => 1,
            Region::Core => 2,
            Region::Enhancing => 3,
        }
    }

    pub fn contains(self, label: u8) -> bool {
        label >= self.min_label()
    }
}

/// One subject: co-registered modality volumes, labels and a brain mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    id: String,
    classes: usize,
    extents: [usize; 3],
    volumes: Vec<Tensor<f32>>,
    labels: Vec<u8>,
    brain_mask: Vec<bool>,
}

impl Case {
    /// Validates shapes, label range and that tumor labels stay inside the mask.
    pub fn new(
        id: impl Into<String>,
        classes: usize,
        volumes: Vec<Tensor<f32>>,
        labels: Vec<u8>,
        brain_mask: Vec<bool>,
    ) -> Result<Self> {
        let first = volumes
            .first()
            .ok_or_else(|| Error::contract("a case needs at least one modality"))?;
        let extents: [usize; 3] = first
            .shape()
            .try_into()
            .map_err(|_| Error::dim(format!("volumes must be 3-D, got {:?}", first.shape())))?;
        for (i, v) in volumes.iter().enumerate() {
            if v.shape() != extents {
                return Err(Error::dim(format!("volume {i} has shape {:?}, expected {extents:?}", v.shape())));
            }
        }
        let n = first.len();
        if labels.len() != n || brain_mask.len() != n {
            return Err(Error::dim(format!(
                "labels ({}) and mask ({}) must have {n} voxels",
                labels.len(),
                brain_mask.len()
            )));
        }
        if !(2..=u8::MAX as usize).contains(&classes) {
            return Err(Error::contract(format!("classes must be in 2..=255, got {classes}")));
        }
        if let Some(j) = labels.iter().position(|&l| l as usize >= classes) {
            return Err(Error::contract(format!("label {} at voxel {j} is not below {classes}", labels[j])));
        }
        if let Some(j) = (0..n).find(|&j| labels[j] != 0 && !brain_mask[j]) {
            return Err(Error::contract(format!("tumor label at voxel {j} lies outside the brain mask")));
        }
        Ok(Case {
            id: id.into(),
            classes,
            extents,
            volumes,
            labels,
            brain_mask,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn set_id(&mut self, id: impl Into<String>) {
        self.id = id.into();
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn modalities(&self) -> usize {
        self.volumes.len()
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn voxels(&self) -> usize {
        self.labels.len()
    }

    pub fn volumes(&self) -> &[Tensor<f32>] {
        &self.volumes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn brain_mask(&self) -> &[bool] {
        &self.brain_mask
    }

    /// Voxel count of each class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    pub fn has_tumor(&self) -> bool {
        self.labels.iter().any(|&l| l != 0)
    }

    /// Volumes reshaped to `[1, D, H, W]`, the layout the network consumes.
    pub fn network_inputs(&self) -> Vec<Tensor<f32>> {
        let [d, h, w] = self.extents;
        self.volumes
            .iter()
            .map(|v| v.clone().reshape([1, d, h, w]).expect("same element count"))
            .collect()
    }

    /// Sub-volume starting at `origin` with edge `edge` along every axis.
    pub fn window(&self, origin: [usize; 3], edge: usize) -> Result<Case> {
        let [_, h, w] = self.extents;
        if (0..3).any(|a| origin[a] + edge > self.extents[a]) || edge == 0 {
            return Err(Error::contract(format!(
                "window at {origin:?} with edge {edge} exceeds extents {:?}",
                self.extents
            )));
        }
        let [oz, oy, ox] = origin;
        let index = |j: usize| {
            let (z, r) = (j / (edge * edge), j % (edge * edge));
            ((oz + z) * h + oy + r / edge) * w + ox + r % edge
        };
        let n = edge.pow(3);
        let volumes = self
            .volumes
            .iter()
            .map(|v| Tensor::from_fn([edge, edge, edge], |j| v.data()[index(j)]))
            .collect();
        Ok(Case {
            id: self.id.clone(),
            classes: self.classes,
            extents: [edge; 3],
            volumes,
            labels: (0..n).map(|j| self.labels[index(j)]).collect(),
            brain_mask: (0..n).map(|j| self.brain_mask[index(j)]).collect(),
        })
    }

    pub(crate) fn with_volumes(&self, volumes: Vec<Tensor<f32>>) -> Case {
        Case {
            volumes,
            ..self.clone()
        }
    }
}
