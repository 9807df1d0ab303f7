use rand::Rng;

use crate::error::{Error, Result};

/// Conventional modality order.
pub const MODALITY_NAMES: [&str; 4] = ["FLAIR", "T1", "T1c", "T2"];

/// Which modalities contribute content codes. At least one is always present.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ModalityMask {
    kept: Vec<bool>,
}

impl ModalityMask {
    pub fn new(kept: Vec<bool>) -> Result<Self> {
        if !kept.iter().any(|&k| k) {
            return Err(Error::contract("modality mask must keep at least one modality"));
        }
        Ok(ModalityMask { kept })
    }

    pub fn all(modalities: usize) -> Self {
        ModalityMask {
            kept: vec![true; modalities],
        }
    }

    /// Bit `i` of `bits` set means modality `i` is kept.
    pub fn from_bits(bits: u32, modalities: usize) -> Result<Self> {
        Self::new((0..modalities).map(|i| bits & (1 << i) != 0).collect())
    }

    pub fn bits(&self) -> u32 {
        self.kept
            .iter()
            .enumerate()
            .filter(|(_, &k)| k)
            .map(|(i, _)| 1 << i)
            .sum()
    }

    /// Parses a comma-separated list such as `FLAIR,T1c` (case-insensitive).
    pub fn parse(list: &str, modalities: usize) -> Result<Self> {
        let mut kept = vec![false; modalities];
        for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let i = MODALITY_NAMES
                .iter()
                .take(modalities)
                .position(|m| m.eq_ignore_ascii_case(name))
                .ok_or_else(|| Error::config(format!("unknown modality {name:?}")))?;
            kept[i] = true;
        }
        Self::new(kept)
    }

    /// Every non-empty subset, ordered by bit pattern.
    pub fn all_subsets(modalities: usize) -> Vec<ModalityMask> {
        (1..1u32 << modalities)
            .map(|bits| Self::from_bits(bits, modalities).expect("non-zero bits"))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.kept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }

    pub fn is_kept(&self, i: usize) -> bool {
        self.kept[i]
    }

    pub fn kept_count(&self) -> usize {
        self.kept.iter().filter(|&&k| k).count()
    }

    pub fn is_all(&self) -> bool {
        self.kept.iter().all(|&k| k)
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.kept
    }

    /// Names of kept modalities joined by `+`.
    pub fn label(&self) -> String {
        self.kept
            .iter()
            .enumerate()
            .filter(|(_, &k)| k)
            .map(|(i, _)| MODALITY_NAMES.get(i).copied().unwrap_or("?"))
            .collect::<Vec<_>>()
            .join("+")
    }
}

/// Drops each modality independently with probability `dropout_prob`,
/// redrawing until at least one survives.
pub fn sample_modality_mask(rng: &mut impl Rng, modalities: usize, dropout_prob: f64) -> ModalityMask {
    assert!((0.0..1.0).contains(&dropout_prob), "dropout_prob must be in [0, 1)");
    loop {
        let kept: Vec<bool> = (0..modalities).map(|_| !rng.random_bool(dropout_prob)).collect();
        if let Ok(mask) = ModalityMask::new(kept) {
            return mask;
        }
    }
}
