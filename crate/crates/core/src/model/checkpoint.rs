//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "TTRJCKPT"
//! version      u32
//! config_len   u32      byte length of the config block
//! config       n_encoder_blocks, n_decoder_blocks, d_model, d_ff, n_heads,
//!              vocab_size, max_seq_len (u32 each), tie_lm_head, linear_bias,
//!              mode, bias_policy, ste (u8 each), eps (f64), pad_id, eos_id
//!              (u32 each)
//! n_tensors    u32
//! tensor       name_len u16, name (utf-8), dtype u8, ndim u8, dims u32 x ndim,
//!              payload (elements little-endian, row-major)
//! ```

use std::path::Path;

use super::{build_model, ModelConfig, Seq2SeqModel, EOS_ID, PAD_ID};
use crate::autodiff::{SteMode, Tensor};
use crate::bitlinear::{BiasPolicy, BitLinearConfig, QuantMode};
use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TTRJCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub(crate) struct Writer(pub Vec<u8>);

impl Writer {
    pub fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    pub fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    pub fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Corrupt(format!(
                "truncated while reading {what} at byte {} ({} bytes total)",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    pub fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    pub fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn is_done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn mismatch(field: &str, expected: impl ToString, found: impl ToString) -> Error {
    Error::Mismatch {
        field: field.to_string(),
        expected: expected.to_string(),
        found: found.to_string(),
    }
}

fn ste_tag(s: SteMode) -> u8 {
    match s {
        SteMode::Clipped => 0,
        SteMode::Identity => 1,
    }
}

fn bias_tag(b: BiasPolicy) -> u8 {
    match b {
        BiasPolicy::Literal => 0,
        BiasPolicy::PostDequant => 1,
    }
}

/// The config block shared by checkpoint and export files.
pub(crate) fn encode_config_block(config: &ModelConfig, mode: QuantMode, bit: &BitLinearConfig) -> Vec<u8> {
    let c = config;
    let mut cfg = Writer(Vec::new());
    for v in [
        c.n_encoder_blocks,
        c.n_decoder_blocks,
        c.d_model,
        c.d_ff,
        c.n_heads,
        c.vocab_size,
        c.max_seq_len,
    ] {
        cfg.u32(v as u32);
    }
    cfg.u8(c.tie_lm_head as u8);
    cfg.u8(c.linear_bias as u8);
    cfg.u8(mode.tag());
    cfg.u8(bias_tag(bit.bias_policy));
    cfg.u8(ste_tag(bit.ste));
    cfg.f64(bit.eps);
    cfg.u32(PAD_ID as u32);
    cfg.u32(EOS_ID as u32);
    cfg.0
}

pub fn encode_checkpoint<T: Scalar>(model: &Seq2SeqModel<T>) -> Vec<u8> {
    let cfg = Writer(encode_config_block(&model.config, model.mode, &model.bit_config));
    let mut w = Writer(Vec::new());
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.u32(cfg.0.len() as u32);
    w.bytes(&cfg.0);
    w.u32(model.params.len() as u32);
    for (_, p) in model.params.iter() {
        w.u16(p.name.len() as u16);
        w.bytes(p.name.as_bytes());
        w.u8(T::DTYPE.tag());
        w.u8(p.value.shape().len() as u8);
        for &d in p.value.shape() {
            w.u32(d as u32);
        }
        for &v in p.value.data() {
            v.write_le(&mut w.0);
        }
    }
    w.0
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Seq2SeqModel<T>> {
    let mut r = Reader::new(bytes);
    let magic = r.take(8, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Corrupt("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(mismatch("version", CHECKPOINT_VERSION, version));
    }
    let cfg_len = r.u32("config length")? as usize;
    let (config, mode, bit) = decode_config_block(r.take(cfg_len, "config block")?)?;
    let mut model: Seq2SeqModel<T> = build_model(config, mode, bit, 0)?;
    let n = r.u32("tensor count")? as usize;
    if n != model.params.len() {
        return Err(mismatch("tensor count", model.params.len(), n));
    }
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let name_len = r.u16("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::Corrupt("tensor name is not utf-8".into()))?
            .to_string();
        let want = model.params.param(id).name.clone();
        if name != want {
            return Err(mismatch("tensor name", want, name));
        }
        let dt = r.u8("dtype")?;
        match DType::from_tag(dt) {
            Some(d) if d == T::DTYPE => {}
            Some(d) => return Err(mismatch(&format!("{name}.dtype"), T::DTYPE.name(), d.name())),
            None => return Err(Error::Corrupt(format!("{name}: unknown dtype tag {dt}"))),
        }
        let ndim = r.u8("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("dimension")? as usize);
        }
        let expected = model.params.get(id).shape().to_vec();
        if shape != expected {
            return Err(mismatch(&format!("{name}.shape"), format!("{expected:?}"), format!("{shape:?}")));
        }
        let len: usize = shape.iter().product();
        let payload = r.take(len * T::BYTES, &format!("{name} payload"))?;
        let data = payload.chunks_exact(T::BYTES).map(T::read_le).collect();
        *model.params.get_mut(id) = Tensor::new(&shape, data)?;
    }
    if !r.is_done() {
        return Err(Error::Corrupt("trailing bytes after last tensor".into()));
    }
    Ok(model)
}

pub(crate) fn decode_config_block(bytes: &[u8]) -> Result<(ModelConfig, QuantMode, BitLinearConfig)> {
    let mut c = Reader::new(bytes);
    let mut dims = [0usize; 7];
    for (d, name) in dims.iter_mut().zip([
        "n_encoder_blocks",
        "n_decoder_blocks",
        "d_model",
        "d_ff",
        "n_heads",
        "vocab_size",
        "max_seq_len",
    ]) {
        *d = c.u32(name)? as usize;
    }
    let config = ModelConfig {
        n_encoder_blocks: dims[0],
        n_decoder_blocks: dims[1],
        d_model: dims[2],
        d_ff: dims[3],
        n_heads: dims[4],
        vocab_size: dims[5],
        max_seq_len: dims[6],
        tie_lm_head: c.u8("tie_lm_head")? != 0,
        linear_bias: c.u8("linear_bias")? != 0,
    };
    let mode_tag = c.u8("mode")?;
    let mode = QuantMode::from_tag(mode_tag).ok_or_else(|| Error::Corrupt(format!("unknown mode tag {mode_tag}")))?;
    let bias_policy = match c.u8("bias_policy")? {
        0 => BiasPolicy::Literal,
        1 => BiasPolicy::PostDequant,
        t => return Err(Error::Corrupt(format!("unknown bias policy tag {t}"))),
    };
    let ste = match c.u8("ste")? {
        0 => SteMode::Clipped,
        1 => SteMode::Identity,
        t => return Err(Error::Corrupt(format!("unknown ste tag {t}"))),
    };
    let eps = c.f64("eps")?;
    let pad = c.u32("pad_id")? as usize;
    if pad != PAD_ID {
        return Err(mismatch("pad_id", PAD_ID, pad));
    }
    let eos = c.u32("eos_id")? as usize;
    if eos != EOS_ID {
        return Err(mismatch("eos_id", EOS_ID, eos));
    }
    config.validate().map_err(|e| Error::Corrupt(format!("config block: {e}")))?;

    Ok((config, mode, BitLinearConfig { eps, bias_policy, ste }))
}

pub fn save_checkpoint<T: Scalar>(model: &Seq2SeqModel<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Seq2SeqModel<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
