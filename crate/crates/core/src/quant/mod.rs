//! Quantization math: round-clamp, AbsMax/AbsMean scales, the 8-bit and
//! ternary quantizers used by BitLinear, and two post-training baselines
//! (vector-wise INT8 with outlier decomposition, NF4).
//!
//! Rounding is half-away-from-zero everywhere (`f64::round` semantics).

mod int8;
mod nf4;

pub use int8::{int8_vectorwise_matmul, Int8VectorwiseParams, DEFAULT_OUTLIER_THRESHOLD};
pub use nf4::{nf4_dequantize, nf4_quantize, Nf4Codebook, Nf4Quantized};

use crate::autodiff::{ElementQuantizer, Tensor};
use crate::scalar::Scalar;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Contiguous integer range `[lo, hi]` with `lo <= 0 <= hi`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantRange {
    pub lo: i8,
    pub hi: i8,
}

impl QuantRange {
    pub const INT8: QuantRange = QuantRange { lo: -128, hi: 127 };
    pub const TERNARY: QuantRange = QuantRange { lo: -1, hi: 1 };

    pub fn new(lo: i8, hi: i8) -> Option<Self> {
        (lo <= 0 && 0 <= hi).then_some(Self { lo, hi })
    }

    pub fn levels(&self) -> impl Iterator<Item = i8> {
        self.lo..=self.hi
    }

    pub fn contains(&self, code: i8) -> bool {
        self.lo <= code && code <= self.hi
    }

    /// Round half away from zero, then clamp.
    #[inline]
    pub fn round_clamp<T: Scalar>(&self, z: T) -> i8 {
        let r = z.round();
        if r <= T::lit(self.lo as f64) {
            self.lo
        } else if r >= T::lit(self.hi as f64) {
            self.hi
        } else {
            r.to_i8().expect("rounded value inside i8 range")
        }
    }
}

impl<T: Scalar> ElementQuantizer<T> for QuantRange {
    fn quantize(&self, v: T) -> T {
        T::lit(self.round_clamp(v) as f64)
    }

    fn in_range(&self, v: T) -> bool {
        let r = v.round();
        r >= T::lit(self.lo as f64) && r <= T::lit(self.hi as f64)
    }
}

/// Integer codes with the shape of the tensor they were computed from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantCodes {
    pub shape: Vec<usize>,
    pub codes: Vec<i8>,
}

impl QuantCodes {
    pub fn rows(&self) -> usize {
        let c = self.cols();
        if c == 0 {
            0
        } else {
            self.codes.len() / c
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, r: usize) -> &[i8] {
        let c = self.cols();
        &self.codes[r * c..(r + 1) * c]
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(&self.shape, self.codes.iter().map(|&c| T::lit(c as f64)).collect())
            .expect("codes match shape")
    }
}

pub fn round_clamp<T: Scalar>(z: &Tensor<T>, range: QuantRange) -> QuantCodes {
    QuantCodes {
        shape: z.shape().to_vec(),
        codes: z.data().iter().map(|&v| range.round_clamp(v)).collect(),
    }
}

/// AbsMax activation scale `γ = hi / (max|x| + ε)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActivationQuantParams<T> {
    pub gamma: T,
    pub eps: T,
}

/// AbsMean weight scale `β = 1 / (mean|W| + ε)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightQuantParams<T> {
    pub beta: T,
    pub eps: T,
}

pub fn absmax_scale<T: Scalar>(x_norm: &[T], range: QuantRange, eps: T) -> T {
    let m = x_norm.iter().fold(T::zero(), |m, v| m.max(v.abs()));
    T::lit(range.hi as f64) / (m + eps)
}

/// `1 / (mean|W| + ε)`; the empty tensor is treated as all-zero.
pub fn absmean_scale<T: Scalar>(w: &[T], eps: T) -> T {
    let mean = if w.is_empty() {
        T::zero()
    } else {
        w.iter().map(|v| v.abs()).sum::<T>() / T::lit(w.len() as f64)
    };
    T::one() / (mean + eps)
}

/// Quantizes one activation vector to INT8 with its own AbsMax scale.
pub fn quantize_activations_int8<T: Scalar>(x_norm: &[T], eps: T) -> (Vec<i8>, ActivationQuantParams<T>) {
    let gamma = absmax_scale(x_norm, QuantRange::INT8, eps);
    let q = x_norm
        .iter()
        .map(|&v| QuantRange::INT8.round_clamp(v * gamma))
        .collect();
    (q, ActivationQuantParams { gamma, eps })
}

/// Row-wise INT8 quantization of a matrix (one scale per row/token).
pub fn quantize_activation_rows<T: Scalar>(x_norm: &Tensor<T>, eps: T) -> (QuantCodes, Vec<T>) {
    let c = x_norm.cols();
    let mut codes = Vec::with_capacity(x_norm.len());
    let mut gammas = Vec::with_capacity(x_norm.rows());
    for r in 0..x_norm.rows() {
        let (q, p) = quantize_activations_int8(&x_norm.data()[r * c..(r + 1) * c], eps);
        codes.extend(q);
        gammas.push(p.gamma);
    }
    (
        QuantCodes {
            shape: x_norm.shape().to_vec(),
            codes,
        },
        gammas,
    )
}

/// Ternary codes `round_clamp(β·W, {-1,0,1})` with a single per-tensor β.
pub fn quantize_weights_ternary<T: Scalar>(w: &Tensor<T>, eps: T) -> (QuantCodes, WeightQuantParams<T>) {
    let beta = absmean_scale(w.data(), eps);
    let codes = w
        .data()
        .iter()
        .map(|&v| QuantRange::TERNARY.round_clamp(v * beta))
        .collect();
    (
        QuantCodes {
            shape: w.shape().to_vec(),
            codes,
        },
        WeightQuantParams { beta, eps },
    )
}

pub fn dequantize<T: Scalar>(codes: &[i8], scale: T) -> Vec<T> {
    codes.iter().map(|&c| T::lit(c as f64) / scale).collect()
}

#[cfg(test)]
mod tests;
