//! On-disk formats: flat binary tensors with a small header, a JSON manifest
//! per tensor directory, checkpoints, and ticket bundles.
//!
//! Tensor file layout, all integers little-endian:
//!
//! ```text
//! magic   4 bytes  "SNNT"
//! version u8       1
//! dtype   u8       0 = f32, 1 = bit-packed booleans (LSB first)
//! namelen u16
//! name    namelen bytes, UTF-8
//! ndim    u8
//! dims    ndim x u32
//! payload n x f32, or ceil(n / 8) bytes
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, ParseLocation, Result};
use crate::params::{ParamKind, Parameter, ParameterSet};
use crate::pruner::{BinaryMask, MaskLayer};
use crate::record::write_atomic;
use crate::tensor::NumArray;
use crate::tickets::{Ticket, TicketMetadata};
use crate::trainer::{Checkpoint, RngState};

pub const TENSOR_MAGIC: &[u8; 4] = b"SNNT";
pub const TENSOR_VERSION: u8 = 1;
pub const TICKET_SCHEMA_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DType {
    F32,
    Bits,
}

impl DType {
    fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::Bits => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    Bits(Vec<bool>),
}

impl Payload {
    fn dtype(&self) -> DType {
        match self {
            Payload::F32(_) => DType::F32,
            Payload::Bits(_) => DType::Bits,
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::Bits(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub payload: Payload,
}

pub fn encode_tensor(t: &TensorRecord) -> Result<Vec<u8>> {
    let n: usize = t.shape.iter().product();
    if n != t.payload.len() {
        return Err(Error::Dimension {
            lhs: t.shape.clone(),
            rhs: vec![t.payload.len()],
            context: "tensor shape vs payload",
        });
    }
    let name = t.name.as_bytes();
    let name_len = u16::try_from(name.len()).map_err(|_| Error::Config(format!("tensor name too long: {}", t.name)))?;
    let ndim = u8::try_from(t.shape.len()).map_err(|_| Error::Config("too many dimensions".into()))?;
    let mut out = Vec::with_capacity(12 + name.len() + 4 * t.shape.len() + 4 * n);
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(TENSOR_VERSION);
    out.push(t.payload.dtype().tag());
    out.extend_from_slice(&name_len.to_le_bytes());
    out.extend_from_slice(name);
    out.push(ndim);
    for &d in &t.shape {
        let d = u32::try_from(d).map_err(|_| Error::Config(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    match &t.payload {
        Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        Payload::Bits(v) => {
            for chunk in v.chunks(8) {
                out.push(chunk.iter().enumerate().fold(0u8, |b, (i, &k)| b | (u8::from(k) << i)));
            }
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    source: &'a str,
}

impl<'a> Cursor<'a> {
    fn fail(&self, at: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            source_name: self.source.to_string(),
            location: ParseLocation::ByteOffset(at as u64),
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.fail(self.pos, format!("truncated {what}"))),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

pub fn decode_tensor(bytes: &[u8], source: &str) -> Result<TensorRecord> {
    let mut c = Cursor { bytes, pos: 0, source };
    if c.take(4, "magic")? != TENSOR_MAGIC {
        return Err(c.fail(0, "bad magic, expected SNNT"));
    }
    let version = c.u8("version")?;
    if version != TENSOR_VERSION {
        return Err(c.fail(4, format!("unsupported version {version}")));
    }
    let dtype = match c.u8("dtype")? {
        0 => DType::F32,
        1 => DType::Bits,
        other => return Err(c.fail(5, format!("unknown dtype tag {other}"))),
    };
    let name_len = u16::from_le_bytes(c.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
    let name_at = c.pos;
    let name = std::str::from_utf8(c.take(name_len, "name")?)
        .map_err(|_| c.fail(name_at, "name is not UTF-8"))?
        .to_string();
    let ndim = c.u8("rank")? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(u32::from_le_bytes(c.take(4, "dimension")?.try_into().expect("4 bytes")) as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| c.fail(name_at + name_len + 1, "element count overflows"))?;
    let payload = match dtype {
        DType::F32 => {
            let raw = c.take(n.checked_mul(4).ok_or_else(|| c.fail(c.pos, "payload too large"))?, "payload")?;
            Payload::F32(raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect())
        }
        DType::Bits => {
            let raw = c.take(n.div_ceil(8), "payload")?;
            Payload::Bits((0..n).map(|i| raw[i / 8] >> (i % 8) & 1 == 1).collect())
        }
    };
    if c.pos != bytes.len() {
        return Err(c.fail(c.pos, format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok(TensorRecord { name, shape, payload })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
    dtype: DType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    layer: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kind: Option<ParamKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prunable: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u8,
    tensors: Vec<ManifestEntry>,
}

fn file_name(index: usize, name: &str) -> String {
    let safe: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-' { c } else { '_' })
        .collect();
    format!("{index:03}-{safe}.snnt")
}

fn write_dir(dir: &Path, tensors: &[(TensorRecord, ManifestEntry)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (t, entry) in tensors {
        write_atomic(&dir.join(&entry.file), &encode_tensor(t)?, true)?;
    }
    let manifest = Manifest {
        format: "snnt".into(),
        version: TENSOR_VERSION,
        tensors: tensors.iter().map(|(_, e)| e.clone()).collect(),
    };
    write_atomic(&dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?.as_bytes(), true)?;
    Ok(())
}

fn read_dir(dir: &Path) -> Result<Vec<(TensorRecord, ManifestEntry)>> {
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    manifest
        .tensors
        .into_iter()
        .map(|entry| {
            let path = dir.join(&entry.file);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let t = decode_tensor(&bytes, &path.display().to_string())?;
            if t.name != entry.name || t.shape != entry.shape || t.payload.dtype() != entry.dtype {
                return Err(Error::Serde(format!(
                    "{} disagrees with the manifest entry for {}",
                    path.display(),
                    entry.name
                )));
            }
            Ok((t, entry))
        })
        .collect()
}

pub fn save_params(dir: &Path, params: &ParameterSet) -> Result<()> {
    let tensors: Vec<_> = params
        .iter()
        .enumerate()
        .map(|(i, p)| {
            (
                TensorRecord {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    payload: Payload::F32(p.value.data().to_vec()),
                },
                ManifestEntry {
                    name: p.name.clone(),
                    file: file_name(i, &p.name),
                    shape: p.value.shape().to_vec(),
                    dtype: DType::F32,
                    layer: Some(p.layer),
                    kind: Some(p.kind),
                    prunable: Some(p.prunable),
                },
            )
        })
        .collect();
    write_dir(dir, &tensors)
}

pub fn load_params(dir: &Path) -> Result<ParameterSet> {
    let params = read_dir(dir)?
        .into_iter()
        .map(|(t, e)| {
            let Payload::F32(data) = t.payload else {
                return Err(Error::Serde(format!("{} is not an f32 tensor", t.name)));
            };
            let (Some(layer), Some(kind), Some(prunable)) = (e.layer, e.kind, e.prunable) else {
                return Err(Error::Serde(format!("manifest entry {} lacks parameter metadata", t.name)));
            };
            Ok(Parameter {
                name: t.name,
                layer,
                kind,
                prunable,
                value: NumArray::new(t.shape, data)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ParameterSet::new(params))
}

pub fn save_mask(dir: &Path, mask: &BinaryMask) -> Result<()> {
    let tensors: Vec<_> = mask
        .layers()
        .iter()
        .enumerate()
        .map(|(i, l)| {
            (
                TensorRecord {
                    name: l.name.clone(),
                    shape: l.shape.clone(),
                    payload: Payload::Bits(l.keep().to_vec()),
                },
                ManifestEntry {
                    name: l.name.clone(),
                    file: file_name(i, &l.name),
                    shape: l.shape.clone(),
                    dtype: DType::Bits,
                    layer: None,
                    kind: None,
                    prunable: None,
                },
            )
        })
        .collect();
    write_dir(dir, &tensors)
}

pub fn load_mask(dir: &Path) -> Result<BinaryMask> {
    let layers = read_dir(dir)?
        .into_iter()
        .map(|(t, _)| {
            let Payload::Bits(keep) = t.payload else {
                return Err(Error::Serde(format!("{} is not a bit tensor", t.name)));
            };
            MaskLayer::new(t.name, t.shape, keep)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BinaryMask::new(layers))
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    epoch: usize,
    rng: RngState,
}

/// `params/`, `velocity/` and `checkpoint.json` under `dir`.
pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    save_params(&dir.join("params"), &ckpt.params)?;
    save_params(&dir.join("velocity"), &ckpt.velocity)?;
    let meta = CheckpointMeta {
        epoch: ckpt.epoch,
        rng: ckpt.rng,
    };
    write_atomic(&dir.join("checkpoint.json"), serde_json::to_string_pretty(&meta)?.as_bytes(), true)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join("checkpoint.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    Ok(Checkpoint {
        epoch: meta.epoch,
        params: load_params(&dir.join("params"))?,
        velocity: load_params(&dir.join("velocity"))?,
        rng: meta.rng,
    })
}

#[derive(Serialize, Deserialize)]
struct TicketFile {
    schema_version: u32,
    metadata: TicketMetadata,
}

fn sibling(dir: &Path, tag: &str) -> PathBuf {
    let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or("ticket");
    dir.with_file_name(format!(".{name}.{tag}.{}", std::process::id()))
}

/// Writes `mask/`, `rewind/` and `ticket.json` into a temporary sibling and
/// renames it over `dir`.
pub fn save_ticket(dir: &Path, ticket: &Ticket) -> Result<()> {
    ticket.validate()?;
    let tmp = sibling(dir, "tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    save_mask(&tmp.join("mask"), &ticket.mask)?;
    save_params(&tmp.join("rewind"), &ticket.rewind_params)?;
    let file = TicketFile {
        schema_version: TICKET_SCHEMA_VERSION,
        metadata: ticket.metadata.clone(),
    };
    write_atomic(&tmp.join("ticket.json"), serde_json::to_string_pretty(&file)?.as_bytes(), true)?;
    if dir.exists() {
        let old = sibling(dir, "old");
        fs::rename(dir, &old).map_err(|e| Error::io(dir, e))?;
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
        fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    } else {
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

/// Loads a bundle and checks the recorded sparsity against the mask.
pub fn load_ticket(dir: &Path) -> Result<Ticket> {
    let path = dir.join("ticket.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let file: TicketFile = serde_json::from_str(&text)?;
    if file.schema_version != TICKET_SCHEMA_VERSION {
        return Err(Error::Serde(format!(
            "ticket schema version {} is not supported",
            file.schema_version
        )));
    }
    let ticket = Ticket {
        mask: load_mask(&dir.join("mask"))?,
        rewind_params: load_params(&dir.join("rewind"))?,
        metadata: file.metadata,
    };
    ticket.validate()?;
    Ok(ticket)
}
