//! Binary checkpoints for base models and adapter sets.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PAIRLORA"                 8 bytes
//! version                    u32
//! kind                       u8   (0 = model, 1 = adapter)
//! hparams_len, hparams       u32, UTF-8 TOML
//! entry_count                u32
//! per entry: name_len u16, name, ndim u8, dims u32 x ndim, offset u64
//! payload_len, payload       u64, f32 values
//! crc32 of everything above  u32
//! ```
//!
//! Offsets are byte offsets into the payload. Entries appear in a fixed order.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterRole, AdapterSet, LoraLayer};
use crate::autodiff::{Param, Tensor};
use crate::error::{Error, Result};
use crate::model::{Denoiser, ModelConfig};

pub const MAGIC: &[u8; 8] = b"PAIRLORA";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Model = 0,
    Adapter = 1,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdapterHeader {
    role: AdapterRole,
    scale: f32,
    rank: usize,
}

fn encode(kind: Kind, hparams: &str, entries: &[(String, &Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(kind as u8);
    out.extend_from_slice(&(hparams.len() as u32).to_le_bytes());
    out.extend_from_slice(hparams.as_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, t) in entries {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += 4 * t.numel() as u64;
    }
    out.extend_from_slice(&offset.to_le_bytes());
    for (_, t) in entries {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

struct Decoded {
    kind: Kind,
    hparams: String,
    entries: Vec<(String, Tensor)>,
}

fn decode(bytes: &[u8]) -> Result<Decoded> {
    if bytes.len() < MAGIC.len() + 4 || &bytes[..8] != MAGIC {
        return Err(Error::Format("missing PAIRLORA magic".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Format(format!(
            "checksum mismatch: stored {stored:08x}, computed {actual:08x}"
        )));
    }
    let mut r = Reader { bytes: body, pos: 8 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let kind = match r.u8()? {
        0 => Kind::Model,
        1 => Kind::Adapter,
        k => return Err(Error::Format(format!("unknown kind {k}"))),
    };
    let hlen = r.u32()? as usize;
    let hparams = std::str::from_utf8(r.take(hlen)?)
        .map_err(|_| Error::Format("hparams are not UTF-8".into()))?
        .to_string();
    let count = r.u32()? as usize;
    let mut table = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let nlen = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u8()? as usize;
        let shape = (0..ndim).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()?;
        let offset = r.u64()?;
        table.push((name, shape, offset));
    }
    let payload_len = r.u64()? as usize;
    let payload = r.take(payload_len)?;
    if r.pos != body.len() {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    let entries = table
        .into_iter()
        .map(|(name, shape, offset)| {
            let n: usize = shape.iter().product();
            let start = offset as usize;
            let bytes = start
                .checked_add(4 * n)
                .and_then(|end| payload.get(start..end))
                .ok_or_else(|| Error::Format(format!("tensor `{name}` runs past the payload")))?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            Ok((name, Tensor::new(shape, data)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Decoded { kind, hparams, entries })
}

fn expect_kind(d: &Decoded, kind: Kind) -> Result<()> {
    if d.kind != kind {
        return Err(Error::Format(format!("expected a {kind:?} checkpoint, found {:?}", d.kind)));
    }
    Ok(())
}

pub fn model_to_bytes(model: &Denoiser) -> Result<Vec<u8>> {
    let hparams = toml::to_string(model.config()).map_err(|e| Error::Format(e.to_string()))?;
    let entries: Vec<(String, &Tensor)> = model
        .named_params()
        .into_iter()
        .map(|(n, p)| (n, &p.value))
        .collect();
    encode(Kind::Model, &hparams, &entries)
}

/// Loads a base model; its parameters come back frozen.
pub fn model_from_bytes(bytes: &[u8]) -> Result<Denoiser> {
    let d = decode(bytes)?;
    expect_kind(&d, Kind::Model)?;
    let cfg: ModelConfig = toml::from_str(&d.hparams).map_err(|e| Error::Format(e.to_string()))?;
    let mut model = Denoiser::new(cfg, 0)?;
    model.set_param_values(d.entries.into_iter().collect::<HashMap<_, _>>())?;
    model.set_trainable(false);
    Ok(model)
}

pub fn adapter_to_bytes(set: &AdapterSet) -> Result<Vec<u8>> {
    let header = AdapterHeader {
        role: set.role,
        scale: set.scale,
        rank: set.rank(),
    };
    let hparams = toml::to_string(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut entries = Vec::with_capacity(2 * set.layers.len());
    for (name, l) in &set.layers {
        entries.push((format!("{name}.A"), &l.a.value));
        entries.push((format!("{name}.B"), &l.b.value));
    }
    encode(Kind::Adapter, &hparams, &entries)
}

/// Loads an adapter set. `B` is trainable; `A` is trainable only for the baseline role.
pub fn adapter_from_bytes(bytes: &[u8]) -> Result<AdapterSet> {
    let d = decode(bytes)?;
    expect_kind(&d, Kind::Adapter)?;
    let h: AdapterHeader = toml::from_str(&d.hparams).map_err(|e| Error::Format(e.to_string()))?;
    let mut halves: BTreeMap<String, (Option<Tensor>, Option<Tensor>)> = BTreeMap::new();
    for (name, t) in d.entries {
        let (layer, part) = name
            .rsplit_once('.')
            .ok_or_else(|| Error::Format(format!("bad adapter entry `{name}`")))?;
        let slot = halves.entry(layer.to_string()).or_default();
        match part {
            "A" => slot.0 = Some(t),
            "B" => slot.1 = Some(t),
            _ => return Err(Error::Format(format!("bad adapter entry `{name}`"))),
        }
    }
    let mut set = AdapterSet::empty(h.role);
    set.scale = h.scale;
    for (layer, pair) in halves {
        let (Some(a), Some(b)) = pair else {
            return Err(Error::Format(format!("layer `{layer}` lacks A or B")));
        };
        if a.dim(0) != h.rank || b.shape() != [b.dim(0), h.rank] {
            return Err(Error::Layer {
                layer,
                msg: format!("A {:?} / B {:?} disagree with rank {}", a.shape(), b.shape(), h.rank),
            });
        }
        set.layers.insert(
            layer,
            LoraLayer {
                a: Param::new(a, h.role == AdapterRole::Baseline),
                b: Param::new(b, true),
            },
        );
    }
    Ok(set)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_model(model: &Denoiser, path: &Path) -> Result<()> {
    write(path, &model_to_bytes(model)?)
}

pub fn load_model(path: &Path) -> Result<Denoiser> {
    model_from_bytes(&read(path)?).map_err(|e| with_path(e, path))
}

pub fn save_adapter(set: &AdapterSet, path: &Path) -> Result<()> {
    write(path, &adapter_to_bytes(set)?)
}

pub fn load_adapter(path: &Path) -> Result<AdapterSet> {
    adapter_from_bytes(&read(path)?).map_err(|e| with_path(e, path))
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    }
}
