//! Export file format (little-endian):
//!
//! ```text
//! magic        8 bytes  "TTRJDPLY"
//! version      u32
//! config_len   u32, config block (same layout as checkpoints)
//! n_entries    u32
//! entry        name_len u16, name, kind u8, then
//!              kind 0 (dense f32): ndim u8, dims u32 x ndim, f32 payload
//!              kind 1 (packed):    encoding u8, rows u32, cols u32,
//!                                  scale f32 (1/β), payload_len u32, payload
//! ```

use std::path::Path;

use super::model::{DeployModel, Entry};
use super::pack::{PackedTernaryMatrix, TritEncoding};
use crate::error::{Error, Result};
use crate::model::{decode_config_block, encode_config_block, Reader, Writer};

pub const EXPORT_MAGIC: &[u8; 8] = b"TTRJDPLY";
pub const EXPORT_VERSION: u32 = 1;

pub fn encode_export(model: &DeployModel) -> Vec<u8> {
    let cfg = encode_config_block(&model.config, model.mode, &model.bit_config);
    let mut w = Writer(Vec::new());
    w.bytes(EXPORT_MAGIC);
    w.u32(EXPORT_VERSION);
    w.u32(cfg.len() as u32);
    w.bytes(&cfg);
    w.u32(model.entries().len() as u32);
    for (name, e) in model.entries() {
        w.u16(name.len() as u16);
        w.bytes(name.as_bytes());
        match e {
            Entry::Dense { shape, data } => {
                w.u8(0);
                w.u8(shape.len() as u8);
                for &d in shape {
                    w.u32(d as u32);
                }
                for v in data {
                    w.bytes(&v.to_le_bytes());
                }
            }
            Entry::Packed(p) => {
                w.u8(1);
                w.u8(p.encoding().tag());
                w.u32(p.rows() as u32);
                w.u32(p.cols() as u32);
                w.bytes(&p.scale().to_le_bytes());
                w.u32(p.payload().len() as u32);
                w.bytes(p.payload());
            }
        }
    }
    w.0
}

pub fn decode_export(bytes: &[u8]) -> Result<DeployModel> {
    let mut r = Reader::new(bytes);
    if r.take(8, "magic")? != EXPORT_MAGIC {
        return Err(Error::Corrupt("not an export file (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != EXPORT_VERSION {
        return Err(Error::Mismatch {
            field: "version".into(),
            expected: EXPORT_VERSION.to_string(),
            found: version.to_string(),
        });
    }
    let cfg_len = r.u32("config length")? as usize;
    let (config, mode, bit) = decode_config_block(r.take(cfg_len, "config block")?)?;
    let n = r.u32("entry count")? as usize;
    let mut entries = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.u16("entry name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "entry name")?)
            .map_err(|_| Error::Corrupt("entry name is not utf-8".into()))?
            .to_string();
        let entry = match r.u8("entry kind")? {
            0 => {
                let ndim = r.u8("ndim")? as usize;
                let mut shape = Vec::with_capacity(ndim);
                for _ in 0..ndim {
                    shape.push(r.u32("dimension")? as usize);
                }
                let count: usize = shape.iter().product();
                let payload = r.take(count * 4, &format!("{name} payload"))?;
                let data = payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                Entry::Dense { shape, data }
            }
            1 => {
                let tag = r.u8("encoding")?;
                let encoding = TritEncoding::from_tag(tag)
                    .ok_or_else(|| Error::Corrupt(format!("{name}: unknown encoding tag {tag}")))?;
                let rows = r.u32("rows")? as usize;
                let cols = r.u32("cols")? as usize;
                let scale = f32::from_le_bytes(r.take(4, "scale")?.try_into().expect("4 bytes"));
                let plen = r.u32("payload length")? as usize;
                let payload = r.take(plen, &format!("{name} payload"))?.to_vec();
                Entry::Packed(PackedTernaryMatrix::from_parts(rows, cols, encoding, payload, scale)?)
            }
            k => return Err(Error::Corrupt(format!("{name}: unknown entry kind {k}"))),
        };
        entries.push((name, entry));
    }
    if !r.is_done() {
        return Err(Error::Corrupt("trailing bytes after last entry".into()));
    }
    DeployModel::assemble(config, mode, bit, entries)
}

pub fn save_export(model: &DeployModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_export(model)).map_err(|e| Error::io(path, e))
}

pub fn load_export(path: impl AsRef<Path>) -> Result<DeployModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_export(&bytes)
}
