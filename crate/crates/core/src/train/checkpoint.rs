//! `MDFZ` checkpoints, all little-endian: magic, version u16, network
//! config, epoch u32, optimizer step u64, named f32 parameters, optional
//! Adam moments, then a CRC-32 of everything before it.

use std::fs;
use std::path::Path;

use super::optim::Adam;
use crate::error::{Error, Result};
use crate::model::{FusionKind, Network, NetworkConfig};
use crate::tensor::Tensor;

pub const MDFZ_MAGIC: &[u8; 4] = b"MDFZ";
pub const MDFZ_VERSION: u16 = 1;
const MAX_NDIM: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub epoch: u32,
    /// In registration order.
    pub params: Vec<(String, Tensor<f32>)>,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn capture(net: &Network<f32>, adam: Option<&Adam<f32>>, epoch: u32) -> Self {
        Checkpoint {
            config: net.config().clone(),
            epoch,
            params: net
                .store()
                .iter()
                .map(|(_, p)| (p.name.clone(), p.value.clone()))
                .collect(),
            optimizer: adam.map(|a| OptimizerState {
                step: a.step_count(),
                m: a.first_moments().to_vec(),
                v: a.second_moments().to_vec(),
            }),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MDFZ_MAGIC);
        out.extend_from_slice(&MDFZ_VERSION.to_le_bytes());
        let c = &self.config;
        out.push(c.modalities as u8);
        out.push(c.classes as u8);
        out.push(c.stages as u8);
        out.push(match c.fusion {
            FusionKind::Gated => 0,
            FusionKind::Average => 1,
        });
        out.push(c.disentangle as u8);
        for v in [c.base_channels, c.appearance_dim, c.patch] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&c.leaky_slope.to_le_bytes());
        out.extend_from_slice(&c.dropout_prob.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.optimizer.as_ref().map_or(0, |o| o.step).to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        let put = |out: &mut Vec<u8>, t: &Tensor<f32>| {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            put(&mut out, t);
        }
        match &self.optimizer {
            None => out.push(0),
            Some(o) => {
                out.push(1);
                for t in o.m.iter().chain(&o.v) {
                    put(&mut out, t);
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MDFZ_MAGIC {
            return Err(Error::parse(0, "bad magic, expected \"MDFZ\""));
        }
        if bytes.len() < 10 {
            return Err(Error::parse(bytes.len(), "truncated header"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != MDFZ_VERSION {
            return Err(Error::parse(4, format!("unsupported version {version}, expected {MDFZ_VERSION}")));
        }
        let body_len = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body_len..].try_into().unwrap());
        if crc32fast::hash(&bytes[..body_len]) != stored {
            return Err(Error::parse(body_len, "checksum mismatch"));
        }
        let mut r = Reader {
            bytes: &bytes[..body_len],
            pos: 6,
        };
        let modalities = r.u8()? as usize;
        let classes = r.u8()? as usize;
        let stages = r.u8()? as usize;
        let fusion = match r.u8()? {
            0 => FusionKind::Gated,
            1 => FusionKind::Average,
            other => return Err(Error::parse(r.pos - 1, format!("unknown fusion tag {other}"))),
        };
        let disentangle = match r.u8()? {
            0 => false,
            1 => true,
            other => return Err(Error::parse(r.pos - 1, format!("bad boolean {other}"))),
        };
        let base_channels = r.u32()? as usize;
        let appearance_dim = r.u32()? as usize;
        let patch = r.u32()? as usize;
        let leaky_slope = r.f64()?;
        let dropout_prob = r.f64()?;
        let config = NetworkConfig {
            modalities,
            classes,
            stages,
            base_channels,
            appearance_dim,
            patch,
            leaky_slope,
            dropout_prob,
            fusion,
            disentangle,
        };
        let at = r.pos;
        config.validate().map_err(|e| Error::parse(at, format!("invalid config: {e}")))?;
        let epoch = r.u32()?;
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::parse(at, "parameter name is not UTF-8"))?
                .to_string();
            let ndim = r.u8()? as usize;
            if ndim == 0 || ndim > MAX_NDIM {
                return Err(Error::parse(r.pos - 1, format!("parameter {name} has {ndim} dimensions")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let t = r.tensor(shape)?;
            params.push((name, t));
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let mut m = Vec::with_capacity(params.len());
                let mut v = Vec::with_capacity(params.len());
                for (_, p) in &params {
                    m.push(r.tensor(p.shape().to_vec())?);
                }
                for (_, p) in &params {
                    v.push(r.tensor(p.shape().to_vec())?);
                }
                Some(OptimizerState { step, m, v })
            }
            other => return Err(Error::parse(r.pos - 1, format!("bad optimizer flag {other}"))),
        };
        if r.pos != body_len {
            return Err(Error::parse(r.pos, format!("{} unexpected bytes", body_len - r.pos)));
        }
        Ok(Checkpoint {
            config,
            epoch,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    /// Builds a network of the stored configuration with the stored weights.
    pub fn network(&self) -> Result<Network<f32>> {
        let mut net = Network::new(self.config.clone(), 0)?;
        self.apply_to(&mut net)?;
        Ok(net)
    }

    /// Overwrites the weights of `net`, which must have the same configuration
    /// and exactly the same parameter names and shapes.
    pub fn apply_to(&self, net: &mut Network<f32>) -> Result<()> {
        if net.config() != &self.config {
            return Err(Error::config(format!(
                "checkpoint was saved for {:?}, network is {:?}",
                self.config,
                net.config()
            )));
        }
        let store = net.store_mut();
        if store.len() != self.params.len() {
            return Err(Error::config(format!(
                "checkpoint has {} parameters, network has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, t) in &self.params {
            let id = store
                .id(name)
                .ok_or_else(|| Error::config(format!("unknown parameter {name} in checkpoint")))?;
            let p = store.get_mut(id);
            if p.value.shape() != t.shape() {
                return Err(Error::config(format!(
                    "parameter {name} has shape {:?} in checkpoint, {:?} in network",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }

    /// Optimizer state aligned with `net`'s registration order, if saved.
    pub fn optimizer_for(&self, net: &Network<f32>) -> Result<Option<Adam<f32>>> {
        let Some(o) = &self.optimizer else {
            return Ok(None);
        };
        let names: Vec<&str> = net.store().names().collect();
        if names.len() != self.params.len() || names.iter().zip(&self.params).any(|(a, (b, _))| a != b) {
            return Err(Error::config("checkpoint parameter order differs from the network"));
        }
        Adam::from_state(net.store(), o.step, o.m.clone(), o.v.clone()).map(Some)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < len {
            return Err(Error::parse(self.pos, format!("truncated: need {len} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self, shape: Vec<usize>) -> Result<Tensor<f32>> {
        let at = self.pos;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n > 0 && n.checked_mul(4).is_some_and(|b| b <= self.bytes.len() - self.pos))
            .ok_or_else(|| Error::parse(at, format!("tensor of shape {shape:?} does not fit the file")))?;
        let raw = self.take(4 * n)?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::parse(at, "non-finite value in tensor"));
        }
        Tensor::new(shape, data).map_err(|e| Error::parse(at, e.to_string()))
    }
}
