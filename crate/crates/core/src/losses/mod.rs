//! Training objectives: soft Dice plus weighted cross-entropy for
//! segmentation, L1 reconstruction, and the KL prior on appearance codes.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::AppearanceCode;
use crate::tensor::{Scalar, Tensor};

/// Stabilizer in the Dice denominator.
pub const DICE_EPS: f64 = 1e-7;
/// Probabilities are clamped here before the logarithm.
pub const LOG_FLOOR: f64 = 1e-8;
/// Weight of an absent class relative to the smallest present-class weight.
pub const ABSENT_CLASS_CAP: f64 = 50.0;
pub const DEFAULT_LAMBDA: f64 = 0.1;
pub const DEFAULT_BETA: f64 = 0.1;

/// Scalar values of one iteration's objectives.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub seg: f64,
    pub rec: f64,
    pub kl: f64,
    pub total: f64,
    pub per_class_dice_terms: Vec<f64>,
    pub class_weights: Vec<f64>,
}

pub struct SegLoss {
    pub loss: Var,
    /// `[K]` soft Dice ratio of every class.
    pub dice_terms: Var,
}

/// One-hot encoding `[K, ...spatial]` of an integer label volume.
pub fn one_hot<T: Scalar>(labels: &[u8], classes: usize, spatial: &[usize]) -> Result<Tensor<T>> {
    let n = labels.len();
    if spatial.iter().product::<usize>() != n {
        return Err(Error::dim(format!("{n} labels do not fill spatial shape {spatial:?}")));
    }
    let mut data = vec![T::zero(); classes * n];
    for (j, &l) in labels.iter().enumerate() {
        let l = l as usize;
        if l >= classes {
            return Err(Error::contract(format!("label {l} out of range for {classes} classes")));
        }
        data[l * n + j] = T::one();
    }
    let mut shape = vec![classes];
    shape.extend_from_slice(spatial);
    Tensor::new(shape, data)
}

/// Inverse-frequency class weights computed from the current batch,
/// renormalized to sum to `K`. An absent class gets at most
/// `ABSENT_CLASS_CAP` times the smallest present-class weight.
pub fn class_weights_online<T: Scalar>(onehot: &Tensor<T>) -> Vec<f64> {
    let k = onehot.channels();
    let n = onehot.spatial_len();
    let counts: Vec<f64> = onehot
        .data()
        .chunks_exact(n)
        .map(|row| row.iter().map(|v| v.as_f64()).sum())
        .collect();
    let mut raw: Vec<f64> = counts.iter().map(|&c| n as f64 / (k as f64 * c.max(1.0))).collect();
    let min_present = counts
        .iter()
        .zip(&raw)
        .filter(|(&c, _)| c > 0.0)
        .map(|(_, &w)| w)
        .fold(f64::INFINITY, f64::min);
    if min_present.is_finite() {
        let cap = ABSENT_CLASS_CAP * min_present;
        for (w, &c) in raw.iter_mut().zip(&counts) {
            if c == 0.0 {
                *w = w.min(cap);
            }
        }
    }
    let total: f64 = raw.iter().sum();
    raw.iter().map(|w| w * k as f64 / total).collect()
}

/// `−Σ_k [ 2Σ_j y q / (Σ_j y² + q² + ε) + w_k Σ_j y log q ]`, with soft
/// probabilities `q` in the Dice term.
pub fn seg_loss<T: Scalar>(
    tape: &mut Tape<T>,
    probs: Var,
    onehot: Var,
    weights: &[f64],
    eps: f64,
) -> Result<SegLoss> {
    if tape.shape(probs) != tape.shape(onehot) {
        return Err(Error::dim(format!(
            "probabilities {:?} and labels {:?} differ in shape",
            tape.shape(probs),
            tape.shape(onehot)
        )));
    }
    let k = tape.shape(probs)[0];
    if weights.len() != k {
        return Err(Error::dim(format!("{} class weights for {k} classes", weights.len())));
    }
    if let Some(w) = weights.iter().find(|w| w.is_nan() || **w < 0.0) {
        return Err(Error::contract(format!("class weights must be non-negative, got {w}")));
    }
    let overlap = tape.mul(onehot, probs)?;
    let overlap = tape.sum_spatial(overlap);
    let numerator = tape.scale(overlap, 2.0);
    let yy = tape.mul(onehot, onehot)?;
    let qq = tape.mul(probs, probs)?;
    let squares = tape.add(yy, qq)?;
    let squares = tape.sum_spatial(squares);
    let denominator = tape.offset(squares, eps);
    let dice_terms = tape.div(numerator, denominator)?;

    let log_q = tape.log_clamped(probs, LOG_FLOOR);
    let ce = tape.mul(onehot, log_q)?;
    let ce = tape.sum_spatial(ce);
    let w = tape.constant(Tensor::new([k], weights.iter().map(|&w| T::of(w)).collect())?);
    let weighted = tape.mul(ce, w)?;

    let per_class = tape.add(dice_terms, weighted)?;
    let total = tape.sum(per_class);
    let loss = tape.scale(total, -1.0);
    Ok(SegLoss { loss, dice_terms })
}

/// `Σ_i ½ Σ_d (μ² + e^{log σ²} − 1 − log σ²)`, the KL divergence of every
/// appearance posterior from the standard normal.
pub fn kl_loss<T: Scalar>(tape: &mut Tape<T>, codes: &[AppearanceCode]) -> Result<Var> {
    let mut terms = Vec::with_capacity(codes.len());
    for code in codes {
        let mu2 = tape.mul(code.mu, code.mu)?;
        let var = tape.exp(code.log_var);
        let a = tape.add(mu2, var)?;
        let b = tape.sub(a, code.log_var)?;
        let c = tape.offset(b, -1.0);
        let s = tape.sum(c);
        terms.push(tape.scale(s, 0.5));
    }
    sum_scalars(tape, &terms)
}

/// `Σ_i mean_j |x̂_ij − x_ij|` over every modality.
pub fn rec_loss<T: Scalar>(tape: &mut Tape<T>, reconstructions: &[Var], originals: &[Var]) -> Result<Var> {
    if reconstructions.len() != originals.len() {
        return Err(Error::dim(format!(
            "{} reconstructions for {} originals",
            reconstructions.len(),
            originals.len()
        )));
    }
    let mut terms = Vec::with_capacity(originals.len());
    for (&r, &x) in reconstructions.iter().zip(originals) {
        let d = tape.sub(r, x)?;
        let a = tape.abs(d);
        terms.push(tape.mean(a));
    }
    sum_scalars(tape, &terms)
}

/// `seg + λ·rec + β·kl`.
pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, seg: Var, rec: Var, kl: Var, lambda: f64, beta: f64) -> Result<Var> {
    let r = tape.scale(rec, lambda);
    let k = tape.scale(kl, beta);
    let t = tape.add(seg, r)?;
    tape.add(t, k)
}

fn sum_scalars<T: Scalar>(tape: &mut Tape<T>, terms: &[Var]) -> Result<Var> {
    match terms.split_first() {
        None => Ok(tape.constant(Tensor::scalar(T::zero()))),
        Some((&first, rest)) => rest.iter().try_fold(first, |acc, &t| tape.add(acc, t)),
    }
}
