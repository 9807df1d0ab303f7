//! `MMVC` case files, all little-endian:
//! magic, version u16, modalities u8, classes u8, extents 3×u32,
//! f32 volumes, u8 labels, brain mask packed LSB-first.

use std::fs;
use std::path::Path;

use super::Case;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MMVC_MAGIC: &[u8; 4] = b"MMVC";
pub const MMVC_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 1 + 1 + 12;
/// Refuse headers that would need more than this many voxels.
const MAX_VOXELS: usize = 1 << 30;

pub fn encode_case(case: &Case) -> Vec<u8> {
    let n = case.voxels();
    let mut out = Vec::with_capacity(HEADER_LEN + n * (4 * case.modalities() + 1) + n.div_ceil(8));
    out.extend_from_slice(MMVC_MAGIC);
    out.extend_from_slice(&MMVC_VERSION.to_le_bytes());
    out.push(case.modalities() as u8);
    out.push(case.classes() as u8);
    for e in case.extents() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for v in case.volumes() {
        for x in v.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out.extend_from_slice(case.labels());
    let mut bits = vec![0u8; n.div_ceil(8)];
    for (j, _) in case.brain_mask().iter().enumerate().filter(|(_, &m)| m) {
        bits[j / 8] |= 1 << (j % 8);
    }
    out.extend_from_slice(&bits);
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let rest = self.bytes.len() - self.pos;
        if rest < len {
            return Err(Error::parse(
                self.bytes.len(),
                format!("truncated while reading {what}: need {len} bytes, {rest} left"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Parses a whole file image; any inconsistency is a parse error with the
/// byte offset where it was detected.
pub fn decode_case(bytes: &[u8], id: &str) -> Result<Case> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic = c.take(4, "magic")?;
    if magic != MMVC_MAGIC {
        return Err(Error::parse(0, format!("bad magic {magic:?}, expected \"MMVC\"")));
    }
    let version = c.u16("version")?;
    if version != MMVC_VERSION {
        return Err(Error::parse(4, format!("unsupported version {version}, expected {MMVC_VERSION}")));
    }
    let modalities = c.u8("modality count")? as usize;
    if modalities == 0 {
        return Err(Error::parse(6, "modality count is zero"));
    }
    let classes = c.u8("class count")? as usize;
    if classes < 2 {
        return Err(Error::parse(7, format!("class count {classes} is below 2")));
    }
    let mut extents = [0usize; 3];
    for (a, e) in extents.iter_mut().enumerate() {
        *e = c.u32("extents")? as usize;
        if *e == 0 {
            return Err(Error::parse(8 + 4 * a, "zero extent"));
        }
    }
    let n = extents
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .filter(|&n| n <= MAX_VOXELS)
        .ok_or_else(|| Error::parse(8, format!("extents {extents:?} are too large")))?;
    let expected = HEADER_LEN + n * (4 * modalities + 1) + n.div_ceil(8);
    if bytes.len() < expected {
        return Err(Error::parse(
            bytes.len(),
            format!("truncated: header promises {expected} bytes, file has {}", bytes.len()),
        ));
    }
    if bytes.len() > expected {
        return Err(Error::parse(expected, format!("{} trailing bytes", bytes.len() - expected)));
    }

    let mut volumes = Vec::with_capacity(modalities);
    for m in 0..modalities {
        let start = c.pos;
        let raw = c.take(4 * n, "volume")?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        if let Some(j) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::parse(start + 4 * j, format!("non-finite intensity in modality {m}")));
        }
        volumes.push(Tensor::new(extents, data)?);
    }
    let label_start = c.pos;
    let labels = c.take(n, "labels")?.to_vec();
    if let Some(j) = labels.iter().position(|&l| l as usize >= classes) {
        return Err(Error::parse(label_start + j, format!("label {} is not below {classes}", labels[j])));
    }
    let mask_start = c.pos;
    let bits = c.take(n.div_ceil(8), "mask")?;
    if n % 8 != 0 && bits[n / 8] >> (n % 8) != 0 {
        return Err(Error::parse(mask_start + n / 8, "mask padding bits are set"));
    }
    let mask: Vec<bool> = (0..n).map(|j| bits[j / 8] >> (j % 8) & 1 == 1).collect();
    if let Some(j) = (0..n).find(|&j| labels[j] != 0 && !mask[j]) {
        return Err(Error::parse(label_start + j, "tumor label outside the brain mask"));
    }
    Case::new(id, classes, volumes, labels, mask)
}

pub fn write_case(case: &Case, path: &Path) -> Result<()> {
    fs::write(path, encode_case(case)).map_err(|e| Error::io(path, e))
}

/// Reads a case; its id is the file stem.
pub fn read_case(path: &Path) -> Result<Case> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    decode_case(&bytes, &id)
}
