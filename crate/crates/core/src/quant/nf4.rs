use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Normal-quantile codebook with `2^k` levels, normalized to `[-1, 1]`.
///
/// Level `i` (1-based) is `Φ⁻¹(i / (2^k + 1))` divided by the largest level.
/// The index range `1..=2^k` is symmetric about the median, so the codebook
/// satisfies `q_i = -q_{2^k+1-i}` and contains no exact zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Nf4Codebook {
    pub k: u32,
    pub levels: Vec<f64>,
    midpoints: Vec<f64>,
}

impl Nf4Codebook {
    pub fn build(k: u32) -> Self {
        assert!((1..=8).contains(&k), "codebook width must be 1..=8 bits");
        let n = 1usize << k;
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        let raw: Vec<f64> = (1..=n)
            .map(|i| normal.inverse_cdf(i as f64 / (n as f64 + 1.0)))
            .collect();
        let top = raw[n - 1];
        let mut levels: Vec<f64> = raw.iter().map(|q| q / top).collect();
        // Mirror the upper half so the symmetry holds bit-exactly.
        for i in 0..n / 2 {
            levels[i] = -levels[n - 1 - i];
        }
        let midpoints = levels.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
        Self { k, levels, midpoints }
    }

    pub fn nf4() -> Self {
        Self::build(4)
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// Index of the nearest level; values on a midpoint go to the lower level.
    pub fn nearest(&self, v: f64) -> u8 {
        self.midpoints.partition_point(|&m| m < v) as u8
    }
}

/// Block-wise NF4 codes with one absmax per block.
#[derive(Debug, Clone, PartialEq)]
pub struct Nf4Quantized<T> {
    pub codes: Vec<u8>,
    pub absmax: Vec<T>,
    pub block_size: usize,
}

/// Scales each block by its absmax and assigns the nearest codebook level.
/// The tensor length must be a multiple of `block_size`.
pub fn nf4_quantize<T: Scalar>(w: &[T], block_size: usize, book: &Nf4Codebook) -> Result<Nf4Quantized<T>> {
    if block_size == 0 || !w.len().is_multiple_of(block_size) {
        return Err(Error::Invalid(format!(
            "block size {block_size} does not divide tensor length {}",
            w.len()
        )));
    }
    let mut codes = Vec::with_capacity(w.len());
    let mut absmax = Vec::with_capacity(w.len() / block_size);
    for block in w.chunks(block_size) {
        let a = block.iter().fold(T::zero(), |m, v| m.max(v.abs()));
        let inv = if a > T::zero() { T::one() / a } else { T::zero() };
        codes.extend(block.iter().map(|&v| book.nearest((v * inv).as_f64())));
        absmax.push(a);
    }
    Ok(Nf4Quantized {
        codes,
        absmax,
        block_size,
    })
}

pub fn nf4_dequantize<T: Scalar>(q: &Nf4Quantized<T>, book: &Nf4Codebook) -> Vec<T> {
    q.codes
        .chunks(q.block_size)
        .zip(&q.absmax)
        .flat_map(|(block, &a)| block.iter().map(move |&c| T::lit(book.levels[c as usize]) * a))
        .collect()
}
