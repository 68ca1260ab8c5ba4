//! Ternary matrix packing.
//!
//! Rows are packed independently, each starting on a byte boundary.
//!
//! * `two_bit`: four trits per byte, trit `j` of a group in bits `2j..2j+2`
//!   (least significant first). Codes: `00` = 0, `01` = +1, `10` = -1,
//!   `11` reserved. Row padding uses code `00`.
//! * `base243`: five trits per byte, byte = Σ (tᵢ + 1)·3ⁱ. Row padding uses
//!   trit 0, so a byte never exceeds 242.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use crate::bitlinear::BiasPolicy;
use crate::error::{Error, Result};
use crate::quant::QuantCodes;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum TritEncoding {
    #[default]
    TwoBit,
    Base243,
}

impl TritEncoding {
    pub fn name(self) -> &'static str {
        match self {
            TritEncoding::TwoBit => "two_bit",
            TritEncoding::Base243 => "base243",
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            TritEncoding::TwoBit => 0,
            TritEncoding::Base243 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(TritEncoding::TwoBit),
            1 => Some(TritEncoding::Base243),
            _ => None,
        }
    }

    pub fn trits_per_byte(self) -> usize {
        match self {
            TritEncoding::TwoBit => 4,
            TritEncoding::Base243 => 5,
        }
    }

    pub fn row_bytes(self, cols: usize) -> usize {
        cols.div_ceil(self.trits_per_byte())
    }
}

impl fmt::Display for TritEncoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TritEncoding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_bit" | "2bit" => Ok(TritEncoding::TwoBit),
            "base243" | "tq1" => Ok(TritEncoding::Base243),
            _ => Err(Error::Invalid(format!("unknown trit encoding `{s}` (two_bit, base243)"))),
        }
    }
}

fn two_bit_code(t: i8) -> u8 {
    match t {
        1 => 0b01,
        -1 => 0b10,
        _ => 0b00,
    }
}

/// Trits of every byte value; reserved or out-of-range bytes decode to
/// zeros and are rejected by [`PackedTernaryMatrix::from_parts`].
fn two_bit_table() -> &'static [[i8; 4]; 256] {
    static T: OnceLock<[[i8; 4]; 256]> = OnceLock::new();
    T.get_or_init(|| {
        let mut t = [[0i8; 4]; 256];
        for (b, out) in t.iter_mut().enumerate() {
            for (j, o) in out.iter_mut().enumerate() {
                *o = match (b >> (2 * j)) & 0b11 {
                    0b01 => 1,
                    0b10 => -1,
                    _ => 0,
                };
            }
        }
        t
    })
}

fn base243_table() -> &'static [[i8; 5]; 256] {
    static T: OnceLock<[[i8; 5]; 256]> = OnceLock::new();
    T.get_or_init(|| {
        let mut t = [[0i8; 5]; 256];
        for (b, out) in t.iter_mut().enumerate().take(243) {
            let mut v = b;
            for o in out.iter_mut() {
                *o = (v % 3) as i8 - 1;
                v /= 3;
            }
        }
        t
    })
}

/// Row-major packed ternary matrix with its dequantization scale `1/β`.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedTernaryMatrix {
    rows: usize,
    cols: usize,
    encoding: TritEncoding,
    payload: Vec<u8>,
    scale: f32,
}

impl PackedTernaryMatrix {
    /// Validates a payload read from elsewhere.
    pub fn from_parts(rows: usize, cols: usize, encoding: TritEncoding, payload: Vec<u8>, scale: f32) -> Result<Self> {
        let want = rows * encoding.row_bytes(cols);
        if payload.len() != want {
            return Err(Error::Mismatch {
                field: "packed payload length".into(),
                expected: want.to_string(),
                found: payload.len().to_string(),
            });
        }
        let bad = match encoding {
            TritEncoding::TwoBit => payload.iter().position(|&b| (0..4).any(|j| (b >> (2 * j)) & 0b11 == 0b11)),
            TritEncoding::Base243 => payload.iter().position(|&b| b >= 243),
        };
        if let Some(i) = bad {
            return Err(Error::Corrupt(format!(
                "invalid {encoding} byte {:#04x} at offset {i}",
                payload[i]
            )));
        }
        Ok(Self {
            rows,
            cols,
            encoding,
            payload,
            scale,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn encoding(&self) -> TritEncoding {
        self.encoding
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    /// `1/β`.
    pub fn scale(&self) -> f32 {
        self.scale
    }

    fn row_payload(&self, r: usize) -> &[u8] {
        let rb = self.encoding.row_bytes(self.cols);
        &self.payload[r * rb..(r + 1) * rb]
    }

    pub fn unpack(&self) -> Vec<i8> {
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            let bytes = self.row_payload(r);
            match self.encoding {
                TritEncoding::TwoBit => bytes.iter().for_each(|&b| out.extend_from_slice(&two_bit_table()[b as usize])),
                TritEncoding::Base243 => bytes.iter().for_each(|&b| out.extend_from_slice(&base243_table()[b as usize])),
            }
            out.truncate((r + 1) * self.cols);
        }
        out
    }

    pub fn unpack_f32(&self) -> Vec<f32> {
        self.unpack().into_iter().map(f32::from).collect()
    }

    /// `Σ_j x_j·T[r, j]` by adding and subtracting entries of `x`.
    pub(crate) fn row_dot(&self, r: usize, x: &[f32]) -> f32 {
        let mut acc = 0.0f32;
        let mut j = 0;
        macro_rules! consume {
            ($trits:expr) => {
                for &t in $trits {
                    if j == x.len() {
                        break;
                    }
                    if t > 0 {
                        acc += x[j];
                    } else if t < 0 {
                        acc -= x[j];
                    }
                    j += 1;
                }
            };
        }
        match self.encoding {
            TritEncoding::TwoBit => {
                let table = two_bit_table();
                for &b in self.row_payload(r) {
                    consume!(&table[b as usize]);
                }
            }
            TritEncoding::Base243 => {
                let table = base243_table();
                for &b in self.row_payload(r) {
                    consume!(&table[b as usize]);
                }
            }
        }
        acc
    }
}

/// Packs a matrix of codes in `{-1, 0, 1}`.
pub fn pack(codes: &[i8], rows: usize, cols: usize, encoding: TritEncoding, scale: f32) -> Result<PackedTernaryMatrix> {
    if codes.len() != rows * cols {
        return Err(Error::shape("pack", &[codes.len()], &[rows, cols]));
    }
    if let Some(i) = codes.iter().position(|c| !(-1..=1).contains(c)) {
        return Err(Error::NotTernary {
            row: i / cols.max(1),
            col: i % cols.max(1),
            value: codes[i] as f64,
        });
    }
    let rb = encoding.row_bytes(cols);
    let per = encoding.trits_per_byte();
    let mut payload = vec![0u8; rows * rb];
    for r in 0..rows {
        let row = &codes[r * cols..(r + 1) * cols];
        for (g, out) in payload[r * rb..(r + 1) * rb].iter_mut().enumerate() {
            let group = &row[g * per..((g + 1) * per).min(cols)];
            *out = match encoding {
                TritEncoding::TwoBit => group
                    .iter()
                    .enumerate()
                    .fold(0u8, |acc, (j, &t)| acc | (two_bit_code(t) << (2 * j))),
                TritEncoding::Base243 => {
                    let mut v = 0u32;
                    let mut p = 1u32;
                    for j in 0..per {
                        let t = group.get(j).copied().unwrap_or(0);
                        v += (t + 1) as u32 * p;
                        p *= 3;
                    }
                    v as u8
                }
            };
        }
    }
    Ok(PackedTernaryMatrix {
        rows,
        cols,
        encoding,
        payload,
        scale,
    })
}

/// Packs floats that must already be exactly -1, 0 or 1.
pub fn pack_f32(values: &[f32], rows: usize, cols: usize, encoding: TritEncoding, scale: f32) -> Result<PackedTernaryMatrix> {
    if values.len() != rows * cols {
        return Err(Error::shape("pack", &[values.len()], &[rows, cols]));
    }
    let mut codes = Vec::with_capacity(values.len());
    for (i, &v) in values.iter().enumerate() {
        if v != 0.0 && v != 1.0 && v != -1.0 {
            return Err(Error::NotTernary {
                row: i / cols.max(1),
                col: i % cols.max(1),
                value: v as f64,
            });
        }
        codes.push(v as i8);
    }
    pack(&codes, rows, cols, encoding, scale)
}

pub fn pack_codes(codes: &QuantCodes, encoding: TritEncoding, scale: f32) -> Result<PackedTernaryMatrix> {
    pack(&codes.codes, codes.rows(), codes.cols(), encoding, scale)
}

fn check_vec(op: &'static str, x: &[f32], p: &PackedTernaryMatrix, bias: Option<&[f32]>) -> Result<()> {
    if x.len() != p.cols {
        return Err(Error::shape(op, &[x.len()], &[p.rows, p.cols]));
    }
    if let Some(b) = bias {
        if b.len() != p.rows {
            return Err(Error::shape(op, &[b.len()], &[p.rows]));
        }
    }
    Ok(())
}

fn finish(acc: f32, bias: f32, scale: f32, policy: BiasPolicy) -> f32 {
    match policy {
        BiasPolicy::Literal => (acc + bias) * scale,
        BiasPolicy::PostDequant => acc * scale + bias,
    }
}

/// `y = (x·Tᵀ + b)/β` (literal bias) or `x·Tᵀ/β + b` (post-dequant).
pub fn packed_matvec(p: &PackedTernaryMatrix, x: &[f32], bias: Option<&[f32]>, policy: BiasPolicy) -> Result<Vec<f32>> {
    check_vec("packed_matvec", x, p, bias)?;
    Ok((0..p.rows)
        .map(|r| finish(p.row_dot(r, x), bias.map_or(0.0, |b| b[r]), p.scale, policy))
        .collect())
}

/// Reference path: unpack to floats, then multiply-accumulate in column order.
pub fn unpacked_matvec(p: &PackedTernaryMatrix, x: &[f32], bias: Option<&[f32]>, policy: BiasPolicy) -> Result<Vec<f32>> {
    check_vec("unpacked_matvec", x, p, bias)?;
    let w = p.unpack_f32();
    Ok((0..p.rows)
        .map(|r| {
            let mut acc = 0.0f32;
            for (xv, wv) in x.iter().zip(&w[r * p.cols..(r + 1) * p.cols]) {
                acc += xv * wv;
            }
            finish(acc, bias.map_or(0.0, |b| b[r]), p.scale, policy)
        })
        .collect())
}

/// Row-by-row [`packed_matvec`] over a row-major `[n × cols]` input.
pub fn packed_matmul(p: &PackedTernaryMatrix, x: &[f32], bias: Option<&[f32]>, policy: BiasPolicy) -> Result<Vec<f32>> {
    if p.cols == 0 || !x.len().is_multiple_of(p.cols) {
        return Err(Error::shape("packed_matmul", &[x.len()], &[p.rows, p.cols]));
    }
    let mut out = Vec::with_capacity(x.len() / p.cols * p.rows);
    for row in x.chunks(p.cols) {
        out.extend(packed_matvec(p, row, bias, policy)?);
    }
    Ok(out)
}
