//! Binary checkpoints: named f64 parameter blobs with a backbone-config
//! digest and a whole-file checksum, written atomically.
//!
//! Layout (all integers little-endian):
//! magic, format version u32, 32-byte config digest, stage string, epoch
//! u64, seed u64, included u8, blob count u64, then per blob
//! (name length u64, name, element count u64, f64 values), and finally a
//! SHA-256 of everything before it.

use crate::backbone::{BackboneSpec, Model};
use crate::data::write_then_rename;
use crate::error::{Error, Result};
use crate::nn::ParamKind;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

const MAGIC: &[u8; 4] = b"PCKP";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IncludedParams {
    /// Only parameters whose trainable flag was set when saving.
    TrainableOnly,
    All,
}

impl IncludedParams {
    fn to_byte(self) -> u8 {
        match self {
            IncludedParams::All => 0,
            IncludedParams::TrainableOnly => 1,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(IncludedParams::All),
            1 => Ok(IncludedParams::TrainableOnly),
            _ => Err(Error::incompatible(format!("unknown included-params tag {b}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub config_digest: [u8; 32],
    pub stage: String,
    pub epoch: u64,
    pub seed: u64,
    pub included: IncludedParams,
}

/// Digest of the backbone layout a checkpoint was written for; loading
/// demands an exact match.
pub fn config_digest(spec: &BackboneSpec) -> [u8; 32] {
    let json = serde_json::to_string(spec).expect("backbone spec serializes");
    let mut h = Sha256::new();
    h.update(json.as_bytes());
    h.finalize().into()
}

fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_str(buf: &mut Vec<u8>, s: &str) {
    push_u64(buf, s.len() as u64);
    buf.extend_from_slice(s.as_bytes());
}

/// Serialize the model's parameters (and, when they are live, the
/// batch-norm running statistics) to `path`, atomically.
pub fn save_checkpoint(
    path: &Path,
    model: &mut Model,
    stage: &str,
    epoch: u64,
    seed: u64,
    included: IncludedParams,
) -> Result<()> {
    let mut blobs: Vec<(String, Vec<f64>)> = Vec::new();
    model.visit_params(&mut |p| {
        if included == IncludedParams::All || p.trainable {
            blobs.push((p.name.clone(), p.value.data().to_vec()));
        }
    });
    // Running statistics are only worth persisting when they are being
    // updated (or when a full snapshot is requested); a trainable-only
    // checkpoint under a frozen backbone stays pure adapter+head.
    let mut stats_live = false;
    model.visit_bns(&mut |bn| stats_live |= bn.use_batch_stats);
    if included == IncludedParams::All || stats_live {
        model.visit_buffers(&mut |b| blobs.push((b.name.clone(), b.value.data().to_vec())));
    }

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&config_digest(&model.spec));
    push_str(&mut buf, stage);
    push_u64(&mut buf, epoch);
    push_u64(&mut buf, seed);
    buf.push(included.to_byte());
    push_u64(&mut buf, blobs.len() as u64);
    for (name, data) in &blobs {
        push_str(&mut buf, name);
        push_u64(&mut buf, data.len() as u64);
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest: [u8; 32] = {
        let mut h = Sha256::new();
        h.update(&buf);
        h.finalize().into()
    };
    buf.extend_from_slice(&digest);
    write_then_rename(path, &buf)
}

struct Cursor<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.b.len() {
            return Err(Error::incompatible("checkpoint truncated"));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u64()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::incompatible("checkpoint name not utf-8"))
    }
}

/// Parse a checkpoint file into its metadata and named blobs, verifying
/// the checksum and format version.
pub fn read_checkpoint(path: &Path) -> Result<(CheckpointMeta, BTreeMap<String, Vec<f64>>)> {
    if !path.exists() {
        return Err(Error::data(format!("checkpoint not found: {}", path.display())));
    }
    let raw = std::fs::read(path)?;
    if raw.len() < 4 + 4 + 32 + 32 || &raw[..4] != MAGIC {
        return Err(Error::incompatible(format!("{} is not a checkpoint file", path.display())));
    }
    let (body, stored) = raw.split_at(raw.len() - 32);
    let digest: [u8; 32] = {
        let mut h = Sha256::new();
        h.update(body);
        h.finalize().into()
    };
    if digest != stored {
        return Err(Error::incompatible(format!("{}: checksum mismatch (corrupt checkpoint)", path.display())));
    }
    let mut c = Cursor { b: body, pos: 4 };
    let version = u32::from_le_bytes(c.take(4)?.try_into().unwrap());
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::incompatible(format!(
            "checkpoint format version {version} (this build reads {CHECKPOINT_FORMAT_VERSION})"
        )));
    }
    let config_digest: [u8; 32] = c.take(32)?.try_into().unwrap();
    let stage = c.string()?;
    let epoch = c.u64()?;
    let seed = c.u64()?;
    let included = IncludedParams::from_byte(c.take(1)?[0])?;
    let count = c.u64()? as usize;
    let mut blobs = BTreeMap::new();
    for _ in 0..count {
        let name = c.string()?;
        let n = c.u64()? as usize;
        let bytes = c.take(n * 8)?;
        let data = bytes.chunks_exact(8).map(|ch| f64::from_le_bytes(ch.try_into().unwrap())).collect();
        blobs.insert(name, data);
    }
    let meta = CheckpointMeta { format_version: version, config_digest, stage, epoch, seed, included };
    Ok((meta, blobs))
}

pub fn read_checkpoint_meta(path: &Path) -> Result<CheckpointMeta> {
    Ok(read_checkpoint(path)?.0)
}

fn check_digest(meta: &CheckpointMeta, model: &Model, path: &Path) -> Result<()> {
    if meta.config_digest != config_digest(&model.spec) {
        return Err(Error::incompatible(format!(
            "{} was written for a different backbone configuration",
            path.display()
        )));
    }
    Ok(())
}

fn copy_blob(name: &str, data: &[f64], dst: &mut crate::tensor::Tensor) -> Result<()> {
    if data.len() != dst.numel() {
        return Err(Error::incompatible(format!(
            "checkpoint blob {name} has {} values, model expects {}",
            data.len(),
            dst.numel()
        )));
    }
    dst.data_mut().copy_from_slice(data);
    Ok(())
}

/// Initialize a model from a full checkpoint. Every backbone parameter
/// must be present; adapters and heads absent from the file keep their
/// fresh initialization (that is how a later stage inserts them).
pub fn load_checkpoint(path: &Path, model: &mut Model) -> Result<CheckpointMeta> {
    let (meta, blobs) = read_checkpoint(path)?;
    check_digest(&meta, model, path)?;
    if meta.included != IncludedParams::All {
        return Err(Error::incompatible(format!(
            "{} holds only trainable parameters; load a full checkpoint first, then overlay it",
            path.display()
        )));
    }
    let mut err = None;
    model.visit_params(&mut |p| {
        if err.is_some() {
            return;
        }
        match blobs.get(&p.name) {
            Some(data) => {
                if let Err(e) = copy_blob(&p.name, data, &mut p.value) {
                    err = Some(e);
                }
            }
            None => {
                if matches!(p.kind, ParamKind::BackboneConv | ParamKind::BnAffine) {
                    err = Some(Error::incompatible(format!(
                        "{}: missing backbone parameter {}",
                        path.display(),
                        p.name
                    )));
                }
            }
        }
    });
    model.visit_buffers(&mut |b| {
        if err.is_some() {
            return;
        }
        if let Some(data) = blobs.get(&b.name) {
            if let Err(e) = copy_blob(&b.name, data, &mut b.value) {
                err = Some(e);
            }
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(meta),
    }
}

/// Copy whatever parameters a checkpoint shares with the model, leaving
/// the rest untouched — how trainable-only checkpoints are applied on top
/// of a loaded base.
pub fn overlay_checkpoint(path: &Path, model: &mut Model) -> Result<CheckpointMeta> {
    let (meta, blobs) = read_checkpoint(path)?;
    check_digest(&meta, model, path)?;
    let mut matched = 0usize;
    let mut err = None;
    model.visit_params(&mut |p| {
        if err.is_some() {
            return;
        }
        if let Some(data) = blobs.get(&p.name) {
            match copy_blob(&p.name, data, &mut p.value) {
                Ok(()) => matched += 1,
                Err(e) => err = Some(e),
            }
        }
    });
    model.visit_buffers(&mut |b| {
        if err.is_some() {
            return;
        }
        if let Some(data) = blobs.get(&b.name) {
            match copy_blob(&b.name, data, &mut b.value) {
                Ok(()) => matched += 1,
                Err(e) => err = Some(e),
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if matched == 0 {
        return Err(Error::incompatible(format!(
            "{} shares no parameters with this model",
            path.display()
        )));
    }
    Ok(meta)
}
