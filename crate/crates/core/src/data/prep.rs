use rand::Rng;

use super::Case;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Tumor-seeking crop attempts before falling back to an unbiased window.
pub const CROP_ATTEMPTS: usize = 20;
/// Share of crops that seek tumor; the rest are drawn uniformly so that
/// tumor-free windows, which inference always meets, are seen in training.
pub const TUMOR_SEEKING_SHARE: f64 = 2.0 / 3.0;

/// Zero mean, unit variance inside `mask`; zero outside.
pub fn normalize(volume: &Tensor<f32>, mask: &[bool]) -> Result<Tensor<f32>> {
    if mask.len() != volume.len() {
        return Err(Error::dim(format!("mask has {} voxels, volume {}", mask.len(), volume.len())));
    }
    let inside = || volume.data().iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v as f64);
    let count = mask.iter().filter(|&&m| m).count();
    if count < 2 {
        return Err(Error::Degenerate(format!("mask has {count} voxels, need at least 2")));
    }
    let mean = inside().sum::<f64>() / count as f64;
    let var = inside().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count as f64;
    if !(var > 0.0 && var.is_finite()) {
        return Err(Error::Degenerate(format!("in-mask variance is {var}")));
    }
    let inv = 1.0 / var.sqrt();
    let data = volume
        .data()
        .iter()
        .zip(mask)
        .map(|(&v, &m)| if m { ((v as f64 - mean) * inv) as f32 } else { 0.0 })
        .collect();
    Tensor::new(volume.shape(), data)
}

/// Normalizes every modality of a case with its brain mask.
pub fn normalize_case(case: &Case) -> Result<Case> {
    let volumes = case
        .volumes()
        .iter()
        .map(|v| normalize(v, case.brain_mask()))
        .collect::<Result<_>>()?;
    Ok(case.with_volumes(volumes))
}

/// Random cubic window. With probability [`TUMOR_SEEKING_SHARE`] it is
/// retried up to [`CROP_ATTEMPTS`] times to contain tumor when the case has any.
pub fn crop_patch(case: &Case, rng: &mut impl Rng, edge: usize) -> Result<Case> {
    let ext = case.extents();
    if edge == 0 || ext.iter().any(|&e| edge > e) {
        return Err(Error::contract(format!("crop edge {edge} does not fit extents {ext:?}")));
    }
    let draw = |rng: &mut _| -> [usize; 3] { ext.map(|e| Rng::random_range(rng, 0..=e - edge)) };
    if case.has_tumor() && rng.random_bool(TUMOR_SEEKING_SHARE) {
        for _ in 0..CROP_ATTEMPTS {
            let origin = draw(rng);
            if window_has_tumor(case, origin, edge) {
                return case.window(origin, edge);
            }
        }
    }
    case.window(draw(rng), edge)
}

fn window_has_tumor(case: &Case, [oz, oy, ox]: [usize; 3], edge: usize) -> bool {
    let [_, h, w] = case.extents();
    let labels = case.labels();
    (oz..oz + edge).any(|z| (oy..oy + edge).any(|y| labels[(z * h + y) * w + ox..][..edge].iter().any(|&l| l != 0)))
}
