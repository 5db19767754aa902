//! The `HCK1` checkpoint container and the training state it carries.
//!
//! Little-endian layout: magic `HCK1`, version `u32`, entry count `u32`, then
//! per entry: name length `u32`, name bytes, dtype tag `u8`, rank `u32`,
//! extents as `u64` each, payload. Entries keep their insertion order.
//!
//! A training checkpoint stores parameters as `param/<name>`, AdamW moments
//! as `adam.m/<name>` and `adam.v/<name>`, and run metadata under `meta/`.
//! Every random stream is derived from (seed, epoch, index), so the seed,
//! completed epochs and optimizer step are the whole generator state.

use std::path::Path;

use hsam_core::attention::NoiseTable;
use hsam_core::config::RunConfig;
use hsam_core::tensor::Tensor;
use hsam_core::train::Trainer;

use crate::bytes::Reader;
use crate::config::{config_hash, model_hash, to_toml};
use crate::error::{io_err, usage, Error, FormatError, Result};

pub const MAGIC: &[u8; 4] = b"HCK1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F64(Vec<f64>),
    U8(Vec<u8>),
    U64(Vec<u64>),
}

impl Payload {
    fn tag(&self) -> u8 {
        match self {
            Payload::F64(_) => 0,
            Payload::U8(_) => 1,
            Payload::U64(_) => 2,
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F64(v) => v.len(),
            Payload::U8(v) => v.len(),
            Payload::U64(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Payload,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: Payload) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.entries.push(Entry { name: name.into(), shape: shape.to_vec(), data });
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, t: &Tensor) {
        self.push(name, t.shape(), Payload::F64(t.data().to_vec()));
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    fn need(&self, name: &str) -> Result<&Entry> {
        self.get(name).ok_or_else(|| usage(format!("checkpoint has no entry {name}")))
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let e = self.need(name)?;
        match &e.data {
            Payload::F64(v) => Ok(Tensor::new(&e.shape, v.clone())?),
            _ => Err(usage(format!("entry {name} is not f64"))),
        }
    }

    pub fn u64(&self, name: &str) -> Result<u64> {
        match &self.need(name)?.data {
            Payload::U64(v) if v.len() == 1 => Ok(v[0]),
            _ => Err(usage(format!("entry {name} is not a u64 scalar"))),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match &self.need(name)?.data {
            Payload::U8(v) => Ok(v),
            _ => Err(usage(format!("entry {name} is not bytes"))),
        }
    }

    pub fn text(&self, name: &str) -> Result<String> {
        String::from_utf8(self.bytes(name)?.to_vec()).map_err(|e| usage(format!("entry {name}: {e}")))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.data.tag());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &e.data {
                Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::U8(v) => out.extend_from_slice(v),
                Payload::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, FormatError> {
        let mut r = Reader::new(bytes);
        if r.take(4, "magic")? != MAGIC {
            return Err(FormatError::field(0, "magic", "not an HCK1 checkpoint"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(FormatError::field(4, "version", format!("unsupported version {version}")));
        }
        let count = r.u32("entry count")?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let at = r.offset();
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|e| FormatError::field(at, "name", e.to_string()))?
                .to_string();
            let tag_at = r.offset();
            let tag = r.u8("dtype")?;
            let rank = r.u32("rank")? as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.u64("extent").map(|d| d as usize)).collect::<std::result::Result<_, _>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| FormatError::field(at, name.clone(), "extents overflow"))?;
            let width = match tag {
                0 | 2 => 8,
                1 => 1,
                t => return Err(FormatError::field(tag_at, name, format!("unknown dtype tag {t}"))),
            };
            let raw = r.take(numel.checked_mul(width).unwrap_or(usize::MAX), &name)?;
            let data = match tag {
                0 => Payload::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
                1 => Payload::U8(raw.to_vec()),
                _ => Payload::U64(raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect()),
            };
            entries.push(Entry { name, shape, data });
        }
        if r.remaining() != 0 {
            return Err(FormatError::at(r.offset(), format!("{} trailing bytes", r.remaining())));
        }
        Ok(Checkpoint { entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Ok(Self::decode(&bytes)?)
    }
}

/// Snapshot of a trainer after `trainer.epoch` completed epochs.
pub fn from_trainer(t: &Trainer) -> Checkpoint {
    let mut ck = Checkpoint::default();
    let toml = to_toml(&t.cfg);
    ck.push("meta/config", &[toml.len()], Payload::U8(toml.into_bytes()));
    ck.push("meta/config_hash", &[32], Payload::U8(config_hash(&t.cfg).to_vec()));
    ck.push("meta/model_hash", &[32], Payload::U8(model_hash(&t.cfg.model).to_vec()));
    ck.push("meta/seed", &[1], Payload::U64(vec![t.cfg.seed]));
    ck.push("meta/epoch", &[1], Payload::U64(vec![t.epoch]));
    ck.push("meta/step", &[1], Payload::U64(vec![t.opt.step]));
    ck.push("meta/noise_table", &[t.table.var.len()], Payload::F64(t.table.var.clone()));
    for (_, p) in t.store.iter() {
        ck.push_tensor(format!("param/{}", p.name), &p.value);
    }
    for (id, p) in t.store.iter() {
        if let (Some(m), Some(v)) = (&t.opt.m[id.0], &t.opt.v[id.0]) {
            ck.push(format!("adam.m/{}", p.name), p.value.shape(), Payload::F64(m.clone()));
            ck.push(format!("adam.v/{}", p.name), p.value.shape(), Payload::F64(v.clone()));
        }
    }
    ck
}

/// Rebuilds a trainer from a checkpoint. The stored configuration is used
/// unless `expected` is given, in which case its architecture must match.
pub fn restore(ck: &Checkpoint, expected: Option<&RunConfig>) -> Result<Trainer> {
    let stored: RunConfig = crate::config::parse(&ck.text("meta/config")?)?;
    if ck.bytes("meta/config_hash")? != config_hash(&stored).as_slice() {
        return Err(usage("checkpoint configuration does not match its recorded hash"));
    }
    if ck.u64("meta/seed")? != stored.seed {
        return Err(Error::Config("checkpoint seed entry differs from its configuration".into()));
    }
    let cfg = match expected {
        Some(e) => {
            if model_hash(&e.model).as_slice() != ck.bytes("meta/model_hash")? {
                return Err(usage("requested architecture does not match the checkpoint (config hash mismatch)"));
            }
            if e.seed != stored.seed {
                return Err(usage(format!("checkpoint was trained with seed {}, not {}", stored.seed, e.seed)));
            }
            e.clone()
        }
        None => stored,
    };
    let table = NoiseTable { var: ck.tensor("meta/noise_table")?.into_data() };
    let mut t = Trainer::new(&cfg, table)?;
    let ids: Vec<_> = t.store.iter().map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in ids {
        let value = ck.tensor(&format!("param/{name}"))?;
        let p = t.store.get_mut(id);
        if value.shape() != p.value.shape() {
            return Err(usage(format!("parameter {name}: checkpoint {:?}, model {:?}", value.shape(), p.value.shape())));
        }
        p.value = value;
        if let (Some(m), Some(v)) = (ck.get(&format!("adam.m/{name}")), ck.get(&format!("adam.v/{name}"))) {
            match (&m.data, &v.data) {
                (Payload::F64(m), Payload::F64(v)) if m.len() == p.value.len() && v.len() == p.value.len() => {
                    t.opt.m[id.0] = Some(m.clone());
                    t.opt.v[id.0] = Some(v.clone());
                }
                _ => return Err(usage(format!("malformed optimizer moments for {name}"))),
            }
        }
    }
    let extra = ck.entries.iter().find(|e| {
        e.name.strip_prefix("param/").is_some_and(|n| t.store.find(n).is_none())
    });
    if let Some(e) = extra {
        return Err(usage(format!("checkpoint entry {} has no matching parameter", e.name)));
    }
    t.epoch = ck.u64("meta/epoch")?;
    t.opt.step = ck.u64("meta/step")?;
    Ok(t)
}
