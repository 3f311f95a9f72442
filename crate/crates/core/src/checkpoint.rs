//! `AFCK` checkpoint files: little-endian header, serialized model spec,
//! training metadata, a per-layer offset table, an f32 payload and a
//! trailing CRC-32 over everything before it.

use std::fs;
use std::path::Path;

use afcyte_tensor::{Scalar, Tensor};

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::model::{FireConfig, Model, ModelSpec};

pub const MAGIC: &[u8; 4] = b"AFCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epoch: u32,
    pub swa: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub meta: TrainingMeta,
}

fn write_spec(w: &mut Writer, spec: &ModelSpec) {
    w.u32(spec.input_channels as u32);
    w.u32(spec.num_classes as u32);
    w.f64(spec.dropout);
    w.u32(spec.fires.len() as u32);
    for f in &spec.fires {
        for v in [f.in_channels, f.squeeze, f.expand1x1, f.expand3x3] {
            w.u32(v as u32);
        }
    }
    for &frozen in &spec.frozen_fire {
        w.u8(frozen as u8);
    }
}

fn read_spec(r: &mut Reader) -> Result<ModelSpec> {
    let input_channels = r.u32()? as usize;
    let num_classes = r.u32()? as usize;
    let dropout = r.f64()?;
    let n = r.u32()? as usize;
    if n > 64 {
        return Err(r.error(format!("implausible fire count {n}")));
    }
    let mut fires = Vec::with_capacity(n);
    for _ in 0..n {
        fires.push(FireConfig::new(
            r.u32()? as usize,
            r.u32()? as usize,
            r.u32()? as usize,
            r.u32()? as usize,
        ));
    }
    let frozen_fire = (0..n).map(|_| r.u8().map(|b| b != 0)).collect::<Result<_>>()?;
    let spec = ModelSpec {
        input_channels,
        num_classes,
        fires,
        dropout,
        frozen_fire,
    };
    spec.validate()?;
    Ok(spec)
}

pub fn encode<T: Scalar>(model: &Model<T>, meta: TrainingMeta) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    write_spec(&mut w, model.spec());
    w.u64(meta.seed);
    w.u32(meta.epoch);
    w.u8(meta.swa as u8);

    w.u32(model.params().len() as u32);
    let mut offset = 0u64;
    for p in model.params() {
        w.str(&p.name);
        w.u8(p.tensor.shape().len() as u8);
        for &d in p.tensor.shape() {
            w.u32(d as u32);
        }
        w.u64(offset);
        w.u64(p.tensor.numel() as u64);
        offset += p.tensor.numel() as u64;
    }
    w.u64(offset);
    for p in model.params() {
        for &v in p.tensor.data() {
            w.f32(v.to_f64_lossy() as f32);
        }
    }
    let crc = crc32fast::hash(w.as_slice());
    w.u32(crc);
    w.into_inner()
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let ctx = "checkpoint";
    if bytes.len() < 12 {
        return Err(Error::format(ctx, "file truncated"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(ctx, "bad magic bytes"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let mut r = Reader::new(ctx, &body[4..]);
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(ctx, format!("unsupported version {version}, expected {VERSION}")));
    }
    if crc32fast::hash(body) != stored {
        return Err(Error::format(ctx, "checksum mismatch (truncated or corrupt file)"));
    }
    let spec = read_spec(&mut r)?;
    let meta = TrainingMeta {
        seed: r.u64()?,
        epoch: r.u32()?,
        swa: r.u8()? != 0,
    };
    let layers = r.u32()? as usize;
    let mut table = Vec::with_capacity(layers.min(1024));
    for _ in 0..layers {
        let name = r.str()?;
        let ndim = r.u8()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let offset = r.u64()? as usize;
        let len = r.u64()? as usize;
        table.push((name, shape, offset, len));
    }
    let total = r.u64()? as usize;
    let payload = r.f32s(total)?;
    r.finish()?;

    let mut tensors = Vec::with_capacity(table.len());
    for (name, shape, offset, len) in table {
        let data = payload
            .get(offset..offset + len)
            .ok_or_else(|| Error::format(ctx, format!("layer {name} exceeds payload")))?
            .to_vec();
        tensors.push(Tensor::from_vec(&shape, data)?);
    }
    let model = Model::from_parts(spec, tensors)?;
    Ok(Checkpoint { model, meta })
}

pub fn save<T: Scalar>(model: &Model<T>, meta: TrainingMeta, path: &Path) -> Result<()> {
    fs::write(path, encode(model, meta)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
