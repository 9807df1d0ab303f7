use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::optim::{poly_lr, Adam};
use crate::autodiff::{Tape, Var};
use crate::data::{crop_patch, normalize_case, read_case, read_manifest, Case};
use crate::error::{Error, Result};
use crate::losses::{self, class_weights_online, one_hot, LossBreakdown};
use crate::model::{sample_modality_mask, ModalityMask, Network};

pub const LOG_HEADER: &str = "iter,epoch,lr,seg,rec,kl,total";

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationLog {
    pub iter: usize,
    pub epoch: usize,
    pub lr: f64,
    pub seg: f64,
    pub rec: f64,
    pub kl: f64,
    pub total: f64,
}

impl IterationLog {
    /// Shortest round-trip formatting, so equal runs give equal bytes.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.iter, self.epoch, self.lr, self.seg, self.rec, self.kl, self.total
        )
    }
}

/// Reads every case listed in a manifest.
pub fn load_cases(manifest: &Path) -> Result<Vec<Case>> {
    read_manifest(manifest)?.iter().map(|p| read_case(p)).collect()
}

/// Sequential, seeded training state. A single generator drives epoch
/// shuffling, cropping, modality dropout and appearance sampling.
pub struct Trainer {
    config: TrainConfig,
    net: Network<f32>,
    adam: Adam<f32>,
    rng: ChaCha8Rng,
    cases: Vec<Case>,
    iteration: usize,
}

impl Trainer {
    /// Cases are normalized once up front, then cropped per iteration.
    pub fn new(config: TrainConfig, cases: &[Case]) -> Result<Self> {
        config.validate()?;
        let n = &config.network;
        if cases.is_empty() {
            return Err(Error::contract("training needs at least one case"));
        }
        for case in cases {
            if case.modalities() != n.modalities || case.classes() != n.classes {
                return Err(Error::config(format!(
                    "case {} has {} modalities and {} classes, network expects {} and {}",
                    case.id(),
                    case.modalities(),
                    case.classes(),
                    n.modalities,
                    n.classes
                )));
            }
        }
        let cases = cases.iter().map(normalize_case).collect::<Result<_>>()?;
        let net = Network::new(n.clone(), config.seed)?;
        let adam = Adam::new(net.store());
        Ok(Trainer {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            net,
            adam,
            cases,
            iteration: 0,
        })
    }

    pub fn network(&self) -> &Network<f32> {
        &self.net
    }

    pub fn optimizer(&self) -> &Adam<f32> {
        &self.adam
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn checkpoint(&self, epoch: usize) -> Checkpoint {
        Checkpoint::capture(&self.net, Some(&self.adam), epoch as u32)
    }

    /// The training objective on one patch, without touching parameters.
    /// `noise` drives appearance sampling; the other outputs are deterministic.
    pub fn loss_on(&self, patch: &Case, mask: &ModalityMask, noise: &mut dyn RngCore) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let (_, breakdown) = objective(&self.net, &self.config, &mut tape, patch, mask, noise)?;
        Ok(breakdown)
    }

    /// One optimizer step on a random crop of case `index`.
    pub fn step(&mut self, index: usize, epoch: usize, lr: f64) -> Result<IterationLog> {
        let n = &self.config.network;
        let case = &self.cases[index];
        let patch = crop_patch(case, &mut self.rng, n.patch)?;
        let mask = sample_modality_mask(&mut self.rng, n.modalities, n.dropout_prob);

        let mut tape = Tape::new();
        let (total, b) = objective(&self.net, &self.config, &mut tape, &patch, &mask, &mut self.rng)?;
        let log = IterationLog {
            iter: self.iteration,
            epoch,
            lr,
            seg: b.seg,
            rec: b.rec,
            kl: b.kl,
            total: b.total,
        };
        if !log.total.is_finite() {
            let culprit = tape
                .first_non_finite()
                .map_or_else(String::new, |(i, op)| format!(", first non-finite node {i} ({op})"));
            return Err(Error::Numeric(format!(
                "non-finite loss at iteration {} (epoch {epoch}, case {}, modalities {}): seg {} rec {} kl {}{culprit}",
                self.iteration,
                case.id(),
                mask.label(),
                log.seg,
                log.rec,
                log.kl
            )));
        }
        self.net.store_mut().zero_grad();
        self.net.store_mut().backward(&tape, total)?;
        drop(tape);
        self.adam
            .step(self.net.store_mut(), lr)
            .map_err(|e| Error::Numeric(format!("iteration {}: {e}", self.iteration)))?;
        self.iteration += 1;
        Ok(log)
    }

    /// One shuffled pass over all cases at the epoch's learning rate.
    pub fn run_epoch(&mut self, epoch: usize, mut on_iteration: impl FnMut(&IterationLog)) -> Result<Vec<IterationLog>> {
        let lr = poly_lr(epoch, self.config.max_epoch, self.config.learning_rate, self.config.poly_power)?;
        let mut order: Vec<usize> = (0..self.cases.len()).collect();
        order.shuffle(&mut self.rng);
        let mut logs = Vec::with_capacity(order.len());
        for index in order {
            let log = self.step(index, epoch, lr)?;
            on_iteration(&log);
            logs.push(log);
        }
        Ok(logs)
    }
}

/// Builds the full objective on `tape` and returns its root with the scalar parts.
fn objective(
    net: &Network<f32>,
    c: &TrainConfig,
    tape: &mut Tape<f32>,
    patch: &Case,
    mask: &ModalityMask,
    noise: &mut dyn RngCore,
) -> Result<(Var, LossBreakdown)> {
    let n = &c.network;
    let out = net.forward(tape, &patch.network_inputs(), mask, Some(noise))?;
    let y = one_hot::<f32>(patch.labels(), n.classes, &[n.patch; 3])?;
    let weights = class_weights_online(&y);
    let y = tape.constant(y);
    let seg = losses::seg_loss(tape, out.probs, y, &weights, losses::DICE_EPS)?;
    let (total, rec, kl) = if n.disentangle {
        let rec = losses::rec_loss(tape, &out.reconstructions, &out.inputs)?;
        let kl = losses::kl_loss(tape, &out.appearance)?;
        let total = losses::total_loss(tape, seg.loss, rec, kl, c.lambda, c.beta)?;
        (total, tape.value(rec).item() as f64, tape.value(kl).item() as f64)
    } else {
        (seg.loss, 0.0, 0.0)
    };
    let breakdown = LossBreakdown {
        seg: tape.value(seg.loss).item() as f64,
        rec,
        kl,
        total: tape.value(total).item() as f64,
        per_class_dice_terms: tape.value(seg.dice_terms).data().iter().map(|&v| v as f64).collect(),
        class_weights: weights,
    };
    Ok((total, breakdown))
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub log_path: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub iterations: usize,
    pub last: IterationLog,
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:04}.mdfz")
}

/// Full run: `log.csv` gets one row per iteration and `epoch_NNNN.mdfz` is
/// written after each epoch. `progress` sees every row as it is produced.
pub fn train(
    config: &TrainConfig,
    cases: &[Case],
    out_dir: &Path,
    mut progress: impl FnMut(&IterationLog),
) -> Result<TrainSummary> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut trainer = Trainer::new(config.clone(), cases)?;
    let log_path = out_dir.join("log.csv");
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    writeln!(log, "{LOG_HEADER}").map_err(|e| Error::io(&log_path, e))?;
    let mut checkpoints = Vec::with_capacity(config.max_epoch);
    let mut last = None;
    for epoch in 0..config.max_epoch {
        let mut rows = String::new();
        let logs = trainer.run_epoch(epoch, |l| {
            writeln!(rows, "{}", l.csv_row()).expect("writing to a String");
            progress(l);
        })?;
        log.write_all(rows.as_bytes()).map_err(|e| Error::io(&log_path, e))?;
        let path = out_dir.join(checkpoint_name(epoch));
        trainer.checkpoint(epoch).save(&path)?;
        checkpoints.push(path);
        last = logs.last().cloned();
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    Ok(TrainSummary {
        log_path,
        checkpoints,
        iterations: trainer.iteration,
        last: last.expect("at least one epoch with one case"),
    })
}
