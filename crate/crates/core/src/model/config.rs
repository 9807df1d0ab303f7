use crate::error::{Error, Result};

/// How per-modality content codes are merged at each stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionKind {
    /// Learned voxel-wise sigmoid gates followed by a 1×1×1 bottleneck.
    Gated,
    /// Mean over the modalities that are present.
    Average,
}

impl FusionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionKind::Gated => "gated",
            FusionKind::Average => "average",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gated" => Ok(FusionKind::Gated),
            "average" => Ok(FusionKind::Average),
            other => Err(Error::config(format!("unknown fusion kind {other:?} (expected gated|average)"))),
        }
    }
}

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub modalities: usize,
    pub classes: usize,
    /// Number of downsampling stages in each content encoder.
    pub stages: usize,
    pub base_channels: usize,
    pub appearance_dim: usize,
    /// Edge of the cubic training patch.
    pub patch: usize,
    pub leaky_slope: f64,
    pub dropout_prob: f64,
    pub fusion: FusionKind,
    /// Appearance encoders and reconstruction decoders present.
    pub disentangle: bool,
}

impl Default for NetworkConfig {
    /// Desk-scale defaults: 4 modalities, 4 classes, 4 stages, 4 base channels, 32³ patches.
    fn default() -> Self {
        NetworkConfig {
            modalities: 4,
            classes: 4,
            stages: 4,
            base_channels: 4,
            appearance_dim: 8,
            patch: 32,
            leaky_slope: 0.01,
            dropout_prob: 0.5,
            fusion: FusionKind::Gated,
            disentangle: true,
        }
    }
}

pub(crate) const RESIDUAL_BLOCKS_PER_DECODER: usize = 4;
pub(crate) const MAX_APPEARANCE_LAYERS: usize = 5;
pub(crate) const MAPPER_HIDDEN: usize = 32;

impl NetworkConfig {
    /// Full-size architecture: 16 base channels, 80³ patches.
    pub fn full_scale() -> Self {
        NetworkConfig {
            base_channels: 16,
            patch: 80,
            ..Self::default()
        }
    }

    /// Smallest useful configuration, used for finite-difference checks.
    pub fn tiny() -> Self {
        NetworkConfig {
            stages: 3,
            base_channels: 2,
            patch: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.modalities == 0 || self.modalities > 8 {
            return Err(Error::config(format!("modalities must be in 1..=8, got {}", self.modalities)));
        }
        if self.classes < 2 {
            return Err(Error::config(format!("classes must be at least 2, got {}", self.classes)));
        }
        if self.stages == 0 || self.base_channels == 0 || self.appearance_dim == 0 {
            return Err(Error::config("stages, base_channels and appearance_dim must be positive"));
        }
        if self.stages >= usize::BITS as usize || !self.patch.is_multiple_of(1 << self.stages) || self.patch == 0 {
            return Err(Error::config(format!(
                "patch {} is not divisible by 2^{}",
                self.patch, self.stages
            )));
        }
        if self.disentangle && self.deepest_extent() < 2 {
            return Err(Error::config(format!(
                "deepest code extent {} is too small for the reconstruction decoder's normalization",
                self.deepest_extent()
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(Error::config(format!("dropout_prob must be in [0, 1), got {}", self.dropout_prob)));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::config(format!("leaky_slope must be in (0, 1), got {}", self.leaky_slope)));
        }
        Ok(())
    }

    /// Channels of content stage `s`.
    pub fn stage_channels(&self, s: usize) -> usize {
        self.base_channels << s
    }

    /// Spatial edge of content stage `s` (each stage ends with a stride-2 conv).
    pub fn stage_extent(&self, s: usize) -> usize {
        self.patch >> (s + 1)
    }

    /// `[C, D, H, W]` of content stage `s`.
    pub fn stage_shape(&self, s: usize) -> [usize; 4] {
        let e = self.stage_extent(s);
        [self.stage_channels(s), e, e, e]
    }

    pub fn deepest_extent(&self) -> usize {
        self.stage_extent(self.stages - 1)
    }

    /// Stride-2 layers in the appearance encoder, capped so the extent stays ≥ 1.
    pub fn appearance_layers(&self) -> usize {
        (self.patch.ilog2() as usize).min(MAX_APPEARANCE_LAYERS)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_stage_shapes() {
        let c = NetworkConfig::default();
        let shapes: Vec<_> = (0..4).map(|s| c.stage_shape(s)).collect();
        assert_eq!(shapes, vec![[4, 16, 16, 16], [8, 8, 8, 8], [16, 4, 4, 4], [32, 2, 2, 2]]);
    }

    #[test]
    fn full_scale_deepest_stage() {
        // 80 / 2^4 = 5 voxels per axis, 16 · 2^3 = 128 channels.
        let c = NetworkConfig::full_scale();
        assert_eq!(c.stage_shape(3), [128, 5, 5, 5]);
        assert_eq!(c.appearance_layers(), 5);
    }

    #[test]
    fn validation() {
        assert!(NetworkConfig::default().validate().is_ok());
        assert!(NetworkConfig::tiny().validate().is_ok());
        let bad = NetworkConfig { patch: 24, ..NetworkConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = NetworkConfig { dropout_prob: 1.0, ..NetworkConfig::default() };
        assert!(bad.validate().is_err());
        // 16 / 2^4 leaves a single voxel, which instance norm cannot handle.
        let bad = NetworkConfig { patch: 16, ..NetworkConfig::default() };
        assert!(bad.validate().is_err());
        let ok = NetworkConfig { patch: 16, disentangle: false, ..NetworkConfig::default() };
        assert!(ok.validate().is_ok());
    }

    #[test]
    fn appearance_depth_is_capped_by_patch() {
        assert_eq!(NetworkConfig::tiny().appearance_layers(), 4);
        assert_eq!(NetworkConfig::default().appearance_layers(), 5);
    }
}
