use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::quant::QuantRange;
use crate::scalar::Scalar;

pub const DEFAULT_OUTLIER_THRESHOLD: f64 = 6.0;

/// Scales and outlier split chosen by [`int8_vectorwise_matmul`].
#[derive(Debug, Clone, PartialEq)]
pub struct Int8VectorwiseParams<T> {
    /// One scale per row of X (`max|row| / 127` over the inlier dimensions).
    pub row_scales: Vec<T>,
    /// One scale per column of W (over the inlier rows).
    pub col_scales: Vec<T>,
    pub alpha: T,
    /// Feature dimensions of X computed in full precision, ascending.
    pub outlier_columns: Vec<usize>,
}

/// `Y = X·W` with mixed-precision decomposition.
///
/// Feature dimensions of `X[m×k]` whose magnitude exceeds `alpha` anywhere are
/// multiplied in full precision; the rest go through a vector-wise INT8
/// product (per-row scales for X, per-column scales for W, i32 accumulation)
/// and are dequantized with the outer product of the scales.
pub fn int8_vectorwise_matmul<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    alpha: T,
) -> Result<(Tensor<T>, Int8VectorwiseParams<T>)> {
    if x.shape().len() != 2 || w.shape().len() != 2 || x.cols() != w.rows() {
        return Err(Error::shape("int8_vectorwise_matmul", x.shape(), w.shape()));
    }
    let (m, k, n) = (x.rows(), x.cols(), w.cols());

    let outlier: Vec<bool> = (0..k)
        .map(|j| (0..m).any(|i| x.at(i, j).abs() > alpha))
        .collect();
    let outlier_columns: Vec<usize> = (0..k).filter(|&j| outlier[j]).collect();

    let mut y = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut y[i * n..(i + 1) * n];
        for &p in &outlier_columns {
            let xv = x.at(i, p);
            for (o, &wv) in row.iter_mut().zip(w.row(p)) {
                *o += xv * wv;
            }
        }
    }

    let hi = T::lit(QuantRange::INT8.hi as f64);
    let safe = |m: T| if m > T::zero() { m / hi } else { T::one() };
    let row_scales: Vec<T> = (0..m)
        .map(|i| {
            let mx = (0..k)
                .filter(|&j| !outlier[j])
                .fold(T::zero(), |a, j| a.max(x.at(i, j).abs()));
            safe(mx)
        })
        .collect();
    let col_scales: Vec<T> = (0..n)
        .map(|j| {
            let mx = (0..k)
                .filter(|&p| !outlier[p])
                .fold(T::zero(), |a, p| a.max(w.at(p, j).abs()));
            safe(mx)
        })
        .collect();

    let inliers: Vec<usize> = (0..k).filter(|&j| !outlier[j]).collect();
    if !inliers.is_empty() {
        let q = |v: T, s: T| QuantRange::INT8.round_clamp(v / s) as i32;
        let xq: Vec<i32> = (0..m)
            .flat_map(|i| inliers.iter().map(move |&j| (i, j)))
            .map(|(i, j)| q(x.at(i, j), row_scales[i]))
            .collect();
        let wq: Vec<i32> = inliers
            .iter()
            .flat_map(|&p| (0..n).map(move |j| (p, j)))
            .map(|(p, j)| q(w.at(p, j), col_scales[j]))
            .collect();
        let kk = inliers.len();
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0i32;
                for p in 0..kk {
                    acc += xq[i * kk + p] * wq[p * n + j];
                }
                y[i * n + j] += T::lit(acc as f64) * row_scales[i] * col_scales[j];
            }
        }
    }

    Ok((
        Tensor::new(&[m, n], y)?,
        Int8VectorwiseParams {
            row_scales,
            col_scales,
            alpha,
            outlier_columns,
        },
    ))
}
