//! The full multimodal network: per-modality content and appearance
//! encoders, stage-wise fusion, segmentation decoder and per-modality
//! reconstruction decoders.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::blocks::{AdaptiveResBlock, Builder, Conv, Linear, ResBlock, Styles};
use super::config::{FusionKind, NetworkConfig, MAPPER_HIDDEN, RESIDUAL_BLOCKS_PER_DECODER};
use super::mask::ModalityMask;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Multi-scale content features of one modality, shallowest stage first.
#[derive(Clone, Debug)]
pub struct ContentPyramid {
    pub stages: Vec<Var>,
}

/// Gaussian appearance latent of one modality.
#[derive(Clone, Copy, Debug)]
pub struct AppearanceCode {
    pub mu: Var,
    pub log_var: Var,
    /// `mu + exp(log_var / 2)·noise` when training, `mu` otherwise.
    pub sample: Var,
}

/// Result of merging one stage's content codes.
#[derive(Clone, Debug)]
pub struct GatedFusionOutput {
    /// Fused code, shaped like any single modality's code at this stage.
    pub z: Var,
    /// One single-channel gate map per modality (empty for average fusion).
    pub gates: Vec<Var>,
    /// Gate-weighted codes `c_i ⊙ g_i` (empty for average fusion).
    pub gated: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Modality volumes as placed on the tape.
    pub inputs: Vec<Var>,
    pub logits: Var,
    pub probs: Var,
    /// One `[1, P, P, P]` volume per modality, dropped ones included.
    pub reconstructions: Vec<Var>,
    pub appearance: Vec<AppearanceCode>,
    pub fused: Vec<GatedFusionOutput>,
    /// `None` for modalities the mask dropped; their encoder never runs.
    pub content: Vec<Option<ContentPyramid>>,
}

#[derive(Clone, Debug)]
struct ContentEncoder {
    stages: Vec<(ResBlock, Conv)>,
}

#[derive(Clone, Debug)]
struct AppearanceEncoder {
    convs: Vec<Conv>,
    mu: Linear,
    log_var: Linear,
}

#[derive(Clone, Debug)]
struct FusionBlock {
    gate: Conv,
    bottleneck: Conv,
}

#[derive(Clone, Debug)]
struct UpStage {
    conv: Conv,
    block: ResBlock,
    skip: Option<usize>,
}

#[derive(Clone, Debug)]
struct SegDecoder {
    ups: Vec<UpStage>,
    head: Conv,
}

#[derive(Clone, Debug)]
struct RecDecoder {
    hidden: Linear,
    styles: Linear,
    blocks: Vec<AdaptiveResBlock>,
    ups: Vec<Conv>,
    channels: usize,
}

/// Network parameters plus the module structure that addresses them.
#[derive(Clone, Debug)]
pub struct Network<T> {
    config: NetworkConfig,
    store: ParamStore<T>,
    content: Vec<ContentEncoder>,
    appearance: Vec<AppearanceEncoder>,
    fusion: Vec<FusionBlock>,
    seg: SegDecoder,
    rec: Vec<RecDecoder>,
}

impl<T: Scalar> Network<T> {
    /// Builds the network with He-initialized weights drawn from `seed`.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
        };
        let c = &config;

        let mut content = Vec::with_capacity(c.modalities);
        for i in 0..c.modalities {
            let mut stages = Vec::with_capacity(c.stages);
            for s in 0..c.stages {
                let cin = if s == 0 { 1 } else { c.stage_channels(s - 1) };
                let ch = c.stage_channels(s);
                let block = ResBlock::new(&mut b, &format!("content_enc.{i}.stage{s}.block"), cin, ch)?;
                let down = Conv::new(&mut b, &format!("content_enc.{i}.stage{s}.down"), ch, ch, 3, 2)?;
                stages.push((block, down));
            }
            content.push(ContentEncoder { stages });
        }

        let mut appearance = Vec::new();
        if c.disentangle {
            for i in 0..c.modalities {
                let mut convs = Vec::new();
                let mut cin = 1;
                for l in 0..c.appearance_layers() {
                    let cout = c.base_channels << l.min(2);
                    convs.push(Conv::new(&mut b, &format!("app_enc.{i}.conv{l}"), cin, cout, 3, 2)?);
                    cin = cout;
                }
                appearance.push(AppearanceEncoder {
                    convs,
                    mu: Linear::new(&mut b, &format!("app_enc.{i}.fc_mu"), cin, c.appearance_dim)?,
                    log_var: Linear::new(&mut b, &format!("app_enc.{i}.fc_log_var"), cin, c.appearance_dim)?,
                });
            }
        }

        let mut fusion = Vec::new();
        if c.fusion == FusionKind::Gated {
            for s in 0..c.stages {
                let ch = c.stage_channels(s);
                fusion.push(FusionBlock {
                    gate: Conv::zeroed(&mut b, &format!("fusion.{s}.gate"), c.modalities * ch, c.modalities, 3)?,
                    bottleneck: Conv::new(&mut b, &format!("fusion.{s}.bottleneck"), c.modalities * ch, ch, 1, 1)?,
                });
            }
        }

        let mut ups = Vec::with_capacity(c.stages);
        let mut ch = c.stage_channels(c.stages - 1);
        for u in 0..c.stages {
            let skip = (c.stages - 1).checked_sub(u + 1);
            let out = skip.map_or(c.base_channels, |t| c.stage_channels(t));
            let conv = Conv::new(&mut b, &format!("seg_dec.up{u}.conv"), ch, out, 3, 1)?;
            let block_in = if skip.is_some() { 2 * out } else { out };
            let block = ResBlock::new(&mut b, &format!("seg_dec.up{u}.block"), block_in, out)?;
            ups.push(UpStage { conv, block, skip });
            ch = out;
        }
        let head = Conv::new(&mut b, "seg_dec.head", ch, c.classes, 1, 1)?;
        let seg = SegDecoder { ups, head };

        let mut rec = Vec::new();
        if c.disentangle {
            let deep = c.stage_channels(c.stages - 1);
            for i in 0..c.modalities {
                let n_styles = RESIDUAL_BLOCKS_PER_DECODER * 4 * deep;
                let hidden = Linear::new(&mut b, &format!("rec_dec.{i}.mapper.fc1"), c.appearance_dim, MAPPER_HIDDEN)?;
                let styles = Linear::new(&mut b, &format!("rec_dec.{i}.mapper.fc2"), MAPPER_HIDDEN, n_styles)?;
                let blocks = (0..RESIDUAL_BLOCKS_PER_DECODER)
                    .map(|r| AdaptiveResBlock::new(&mut b, &format!("rec_dec.{i}.res{r}"), deep))
                    .collect::<Result<Vec<_>>>()?;
                let mut ups = Vec::with_capacity(c.stages);
                let mut ch = deep;
                for u in 0..c.stages {
                    let out = if u + 1 == c.stages { 1 } else { (ch / 2).max(1) };
                    ups.push(Conv::new(&mut b, &format!("rec_dec.{i}.up{u}.conv"), ch, out, 3, 1)?);
                    ch = out;
                }
                rec.push(RecDecoder {
                    hidden,
                    styles,
                    blocks,
                    ups,
                    channels: deep,
                });
            }
        }

        Ok(Network {
            config,
            store,
            content,
            appearance,
            fusion,
            seg,
            rec,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// The same network with parameters converted to another precision.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            store: self.store.cast(),
            content: self.content.clone(),
            appearance: self.appearance.clone(),
            fusion: self.fusion.clone(),
            seg: self.seg.clone(),
            rec: self.rec.clone(),
        }
    }

    fn slope(&self) -> f64 {
        self.config.leaky_slope
    }

    fn check_modality(&self, i: usize) -> Result<()> {
        if i >= self.config.modalities {
            return Err(Error::contract(format!(
                "modality index {i} out of range for {} modalities",
                self.config.modalities
            )));
        }
        Ok(())
    }

    /// Places the modality volumes on the tape as constants after checking shapes.
    pub fn input_vars(&self, tape: &mut Tape<T>, inputs: &[Tensor<T>]) -> Result<Vec<Var>> {
        let p = self.config.patch;
        if inputs.len() != self.config.modalities {
            return Err(Error::dim(format!(
                "expected {} modality volumes, got {}",
                self.config.modalities,
                inputs.len()
            )));
        }
        inputs
            .iter()
            .map(|x| {
                if x.shape() != [1, p, p, p] {
                    return Err(Error::dim(format!("modality volume must be [1, {p}, {p}, {p}], got {:?}", x.shape())));
                }
                Ok(tape.constant(x.clone()))
            })
            .collect()
    }

    pub fn encode_content(&self, tape: &mut Tape<T>, x: Var, modality: usize) -> Result<ContentPyramid> {
        self.check_modality(modality)?;
        let mut h = x;
        let mut stages = Vec::with_capacity(self.config.stages);
        for (block, down) in &self.content[modality].stages {
            h = block.forward(&self.store, tape, h, self.slope())?;
            h = down.forward(&self.store, tape, h)?;
            h = tape.leaky_relu(h, self.slope());
            stages.push(h);
        }
        Ok(ContentPyramid { stages })
    }

    /// `noise` supplies the reparameterization draw; `None` means inference.
    pub fn encode_appearance(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        modality: usize,
        noise: Option<&mut dyn RngCore>,
    ) -> Result<AppearanceCode> {
        self.check_modality(modality)?;
        let enc = self
            .appearance
            .get(modality)
            .ok_or_else(|| Error::contract("network was built without appearance encoders"))?;
        let mut h = x;
        for conv in &enc.convs {
            h = conv.forward(&self.store, tape, h)?;
            h = tape.leaky_relu(h, self.slope());
        }
        let pooled = tape.global_avg_pool(h);
        let mu = enc.mu.forward(&self.store, tape, pooled)?;
        let log_var = enc.log_var.forward(&self.store, tape, pooled)?;
        let sample = match noise {
            None => mu,
            Some(rng) => {
                let d = self.config.appearance_dim;
                let eps = Tensor::from_fn([d], |_| T::of(StandardNormal.sample(rng)));
                let eps = tape.constant(eps);
                let half = tape.scale(log_var, 0.5);
                let std = tape.exp(half);
                let shift = tape.mul(std, eps)?;
                tape.add(mu, shift)?
            }
        };
        Ok(AppearanceCode { mu, log_var, sample })
    }

    /// Merges the codes of one stage. Codes of dropped modalities are
    /// replaced by zeros before anything reads them, so they may be `None`.
    pub fn fuse_stage(
        &self,
        tape: &mut Tape<T>,
        stage: usize,
        codes: &[Option<Var>],
        mask: &ModalityMask,
    ) -> Result<GatedFusionOutput> {
        let m = self.config.modalities;
        if codes.len() != m || mask.len() != m {
            return Err(Error::dim(format!("fusion expects {m} codes and mask entries")));
        }
        let shape = self.config.stage_shape(stage);
        let mut kept = Vec::with_capacity(m);
        for (i, code) in codes.iter().enumerate() {
            if !mask.is_kept(i) {
                kept.push(None);
                continue;
            }
            let code = code.ok_or_else(|| Error::contract(format!("modality {i} is kept but has no content code")))?;
            if tape.shape(code) != shape {
                return Err(Error::dim(format!(
                    "stage {stage} code of modality {i} has shape {:?}, expected {shape:?}",
                    tape.shape(code)
                )));
            }
            kept.push(Some(code));
        }
        if kept.iter().all(Option::is_none) {
            return Err(Error::contract("fusion needs at least one kept modality"));
        }

        match self.config.fusion {
            FusionKind::Average => {
                let present: Vec<Var> = kept.iter().flatten().copied().collect();
                let mut sum = present[0];
                for &v in &present[1..] {
                    sum = tape.add(sum, v)?;
                }
                let z = tape.scale(sum, 1.0 / present.len() as f64);
                Ok(GatedFusionOutput {
                    z,
                    gates: vec![],
                    gated: vec![],
                })
            }
            FusionKind::Gated => {
                let block = &self.fusion[stage];
                let mut zero = None;
                let codes: Vec<Var> = kept
                    .iter()
                    .map(|c| match c {
                        Some(v) => *v,
                        None => *zero.get_or_insert_with(|| tape.constant(Tensor::zeros(shape))),
                    })
                    .collect();
                let stacked = tape.concat_channels(&codes)?;
                let g = block.gate.forward(&self.store, tape, stacked)?;
                let g = tape.sigmoid(g);
                let mut gates = Vec::with_capacity(m);
                let mut gated = Vec::with_capacity(m);
                for (i, &code) in codes.iter().enumerate() {
                    let gi = tape.slice_channels(g, i, 1)?;
                    gated.push(tape.mul_channels(code, gi)?);
                    gates.push(gi);
                }
                let merged = tape.concat_channels(&gated)?;
                let z = block.bottleneck.forward(&self.store, tape, merged)?;
                let z = tape.leaky_relu(z, self.slope());
                Ok(GatedFusionOutput { z, gates, gated })
            }
        }
    }

    /// Fuses every stage with the same mask.
    pub fn fuse_pyramid(
        &self,
        tape: &mut Tape<T>,
        pyramids: &[Option<ContentPyramid>],
        mask: &ModalityMask,
    ) -> Result<Vec<GatedFusionOutput>> {
        (0..self.config.stages)
            .map(|s| {
                let codes: Vec<Option<Var>> = pyramids.iter().map(|p| p.as_ref().map(|p| p.stages[s])).collect();
                self.fuse_stage(tape, s, &codes, mask)
            })
            .collect()
    }

    /// Segmentation logits `[K, P, P, P]` from the fused codes of every stage.
    pub fn decode_segmentation(&self, tape: &mut Tape<T>, fused: &[Var]) -> Result<Var> {
        if fused.len() != self.config.stages {
            return Err(Error::dim(format!(
                "decoder expects {} fused stages, got {}",
                self.config.stages,
                fused.len()
            )));
        }
        let mut h = fused[self.config.stages - 1];
        for up in &self.seg.ups {
            h = tape.upsample2x(h)?;
            h = up.conv.forward(&self.store, tape, h)?;
            h = tape.leaky_relu(h, self.slope());
            if let Some(t) = up.skip {
                if tape.shape(fused[t])[1..] != tape.shape(h)[1..] {
                    return Err(Error::dim(format!(
                        "skip stage {t} has shape {:?} but decoder is at {:?}",
                        tape.shape(fused[t]),
                        tape.shape(h)
                    )));
                }
                h = tape.concat_channels(&[h, fused[t]])?;
            }
            h = up.block.forward(&self.store, tape, h, self.slope())?;
        }
        self.seg.head.forward(&self.store, tape, h)
    }

    /// Reconstructs modality `modality` from the deepest fused code and its appearance code.
    pub fn decode_reconstruction(
        &self,
        tape: &mut Tape<T>,
        z_deepest: Var,
        code: &AppearanceCode,
        modality: usize,
    ) -> Result<Var> {
        self.check_modality(modality)?;
        let dec = self
            .rec
            .get(modality)
            .ok_or_else(|| Error::contract("network was built without reconstruction decoders"))?;
        if tape.shape(code.sample) != [self.config.appearance_dim] {
            return Err(Error::config(format!(
                "appearance code has shape {:?}, decoder expects [{}]",
                tape.shape(code.sample),
                self.config.appearance_dim
            )));
        }
        let h = dec.hidden.forward(&self.store, tape, code.sample)?;
        let h = tape.leaky_relu(h, self.slope());
        let styles = dec.styles.forward(&self.store, tape, h)?;
        let c = dec.channels;
        let mut take = |k: usize, scale: bool| -> Result<Var> {
            let s = tape.slice_channels(styles, k * c, c)?;
            // Scales are predicted as offsets from 1 so a zero mapper is plain instance norm.
            Ok(if scale { tape.offset(s, 1.0) } else { s })
        };
        let mut per_block = Vec::with_capacity(dec.blocks.len());
        for r in 0..dec.blocks.len() {
            per_block.push(Styles {
                first: (take(4 * r, true)?, take(4 * r + 1, false)?),
                second: (take(4 * r + 2, true)?, take(4 * r + 3, false)?),
            });
        }
        let mut x = z_deepest;
        for (block, style) in dec.blocks.iter().zip(&per_block) {
            x = block.forward(&self.store, tape, x, style, self.slope())?;
        }
        let last = dec.ups.len() - 1;
        for (u, conv) in dec.ups.iter().enumerate() {
            x = tape.upsample2x(x)?;
            x = conv.forward(&self.store, tape, x)?;
            if u != last {
                x = tape.leaky_relu(x, self.slope());
            }
        }
        Ok(x)
    }

    /// Full forward pass. `noise` enables reparameterized appearance sampling
    /// (training); pass `None` for deterministic inference.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        inputs: &[Tensor<T>],
        mask: &ModalityMask,
        mut noise: Option<&mut dyn RngCore>,
    ) -> Result<ForwardOutput> {
        if mask.len() != self.config.modalities {
            return Err(Error::dim(format!(
                "mask has {} entries for {} modalities",
                mask.len(),
                self.config.modalities
            )));
        }
        let xs = self.input_vars(tape, inputs)?;
        let mut content = Vec::with_capacity(xs.len());
        for (i, &x) in xs.iter().enumerate() {
            content.push(if mask.is_kept(i) {
                Some(self.encode_content(tape, x, i)?)
            } else {
                None
            });
        }
        let fused = self.fuse_pyramid(tape, &content, mask)?;
        let zs: Vec<Var> = fused.iter().map(|f| f.z).collect();
        let logits = self.decode_segmentation(tape, &zs)?;
        let probs = tape.softmax_channels(logits)?;

        let mut appearance = Vec::new();
        let mut reconstructions = Vec::new();
        if self.config.disentangle {
            let deepest = *zs.last().expect("at least one stage");
            for (i, &x) in xs.iter().enumerate() {
                let rng = noise.as_mut().map(|r| &mut **r as &mut dyn RngCore);
                let code = self.encode_appearance(tape, x, i, rng)?;
                reconstructions.push(self.decode_reconstruction(tape, deepest, &code, i)?);
                appearance.push(code);
            }
        }
        Ok(ForwardOutput {
            inputs: xs,
            logits,
            probs,
            reconstructions,
            appearance,
            fused,
            content,
        })
    }
}
