use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::kernels::gemm_nn;

const EPS: f64 = 1e-5;

#[test]
fn round_clamp_examples() {
    assert_eq!(QuantRange::INT8.round_clamp(0.0f64), 0);
    assert_eq!(QuantRange::INT8.round_clamp(200.4f64), 127);
    assert_eq!(QuantRange::TERNARY.round_clamp(-1.5f64), -1);
    // half away from zero
    assert_eq!(QuantRange::INT8.round_clamp(2.5f32), 3);
    assert_eq!(QuantRange::INT8.round_clamp(-2.5f32), -3);
    assert_eq!(QuantRange::TERNARY.round_clamp(0.5f32), 1);
    assert_eq!(QuantRange::TERNARY.round_clamp(0.4999f32), 0);
}

#[test]
fn quant_range_invariants() {
    assert_eq!(QuantRange::INT8.levels().count(), 256);
    assert_eq!(QuantRange::TERNARY.levels().collect::<Vec<_>>(), vec![-1, 0, 1]);
    assert!(QuantRange::new(1, 3).is_none());
    assert!(QuantRange::new(-2, 0).is_some());
}

#[test]
fn absmax_examples() {
    let g = absmax_scale(&[127.0f64, -3.0], QuantRange::INT8, 0.0);
    assert_eq!(g, 1.0);
    let g = absmax_scale(&[1.0f64, -2.0, 0.5], QuantRange::INT8, EPS);
    assert!((g - 63.4997).abs() < 1e-4, "{g}");
    assert!((g - 127.0 / 2.00001).abs() < 1e-12);
    let g = absmax_scale(&[0.0f64; 4], QuantRange::INT8, EPS);
    assert!(g.is_finite());
    assert!((g - 127.0 / EPS).abs() < 1e-6);
}

#[test]
fn absmean_examples() {
    let b = absmean_scale(&[1.0f64, -1.0, -1.0, 1.0], EPS);
    assert!((b - 1.0).abs() < 1e-4);

    let w = Tensor::<f64>::from_rows(&[&[0.5, -0.5], &[0.5, 0.5]]);
    let (t, p) = quantize_weights_ternary(&w, EPS);
    assert!((p.beta - 2.0).abs() < 1e-3);
    assert_eq!(t.codes, vec![1, -1, 1, 1]);

    let (t, p) = quantize_weights_ternary(&Tensor::<f64>::zeros(&[3, 3]), EPS);
    assert!((p.beta - 1.0 / EPS).abs() < 1e-6);
    assert!(t.codes.iter().all(|&c| c == 0));
}

#[test]
fn activation_extreme_element_hits_range_edge() {
    let x = [0.3f32, -2.5, 1.1, 0.0];
    let (q, p) = quantize_activations_int8(&x, EPS as f32);
    assert_eq!(q[1], -127);
    assert!(p.gamma > 0.0);
    let (q, _) = quantize_activations_int8(&[0.0f32; 5], EPS as f32);
    assert!(q.iter().all(|&c| c == 0));
}

#[test]
fn activation_reconstruction_within_half_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..200 {
        let n = rng.gen_range(1..40);
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let (q, p) = quantize_activations_int8(&x, EPS);
        let back = dequantize(&q, p.gamma);
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() <= 0.5 / p.gamma + 1e-12);
        }
    }
}

#[test]
fn activation_rows_use_independent_scales() {
    let x = Tensor::<f64>::from_rows(&[&[1.0, -2.0], &[10.0, 5.0]]);
    let (codes, gammas) = quantize_activation_rows(&x, EPS);
    assert_eq!(codes.row(0)[1], -127);
    assert_eq!(codes.row(1)[0], 127);
    assert!(gammas[0] > gammas[1]);
}

#[test]
fn ternary_sign_matrix_identity() {
    let s = [1.0, -1.0, -1.0, 1.0, 1.0, 1.0];
    for c in [0.01, 0.7, 3.0, 250.0] {
        let w = Tensor::<f64>::new(&[2, 3], s.iter().map(|v| v * c).collect()).unwrap();
        let (t, _) = quantize_weights_ternary(&w, EPS);
        let expect: Vec<i8> = s.iter().map(|&v| v as i8).collect();
        assert_eq!(t.codes, expect, "c = {c}");
    }
}

/// Independent elementwise rule: zero below half the scaled mean, sign above.
fn ternary_oracle(w: &[f64], eps: f64) -> Vec<i8> {
    let mut total = 0.0;
    for v in w {
        total += v.abs();
    }
    let beta = 1.0 / (total / w.len() as f64 + eps);
    w.iter()
        .map(|&v| {
            let z = v * beta;
            if z.abs() < 0.5 {
                0
            } else if z > 0.0 {
                1
            } else {
                -1
            }
        })
        .collect()
}

#[test]
fn ternary_threshold_rule_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..500 {
        let n = rng.gen_range(1..50);
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let (t, _) = quantize_weights_ternary(&Tensor::from_vec(w.clone()), EPS);
        assert_eq!(t.codes, ternary_oracle(&w, EPS));
    }
}

proptest! {
    #[test]
    fn round_clamp_stays_in_range(z in -1e4f64..1e4, lo in -128i8..=0, hi in 0i8..=127) {
        let r = QuantRange::new(lo, hi).unwrap();
        let c = r.round_clamp(z);
        prop_assert!(r.contains(c));
        prop_assert!(QuantRange::TERNARY.levels().any(|l| l == QuantRange::TERNARY.round_clamp(z)));
    }

    #[test]
    fn ternary_codes_scale_invariant(
        w in proptest::collection::vec(-3.0f64..3.0, 1..32),
        c in 0.05f64..20.0,
    ) {
        let t1 = quantize_weights_ternary(&Tensor::from_vec(w.clone()), EPS).0;
        let t2 = quantize_weights_ternary(&Tensor::from_vec(w.iter().map(|v| v * c).collect()), EPS).0;
        prop_assert_eq!(t1.codes, t2.codes);
    }
}

fn float_matmul(x: &Tensor<f64>, w: &Tensor<f64>) -> Vec<f64> {
    let mut out = vec![0.0; x.rows() * w.cols()];
    gemm_nn(x.data(), w.data(), x.rows(), x.cols(), w.cols(), &mut out);
    out
}

#[test]
fn int8_alpha_zero_is_bit_identical_to_float() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let (m, k, n) = (rng.gen_range(1..6), rng.gen_range(1..9), rng.gen_range(1..6));
        let x = Tensor::<f64>::rand_uniform(&[m, k], -3.0, 3.0, &mut rng);
        let w = Tensor::<f64>::rand_uniform(&[k, n], -1.0, 1.0, &mut rng);
        let (y, p) = int8_vectorwise_matmul(&x, &w, 0.0).unwrap();
        assert_eq!(y.data(), &float_matmul(&x, &w)[..]);
        assert_eq!(p.outlier_columns.len(), k);
    }
}

#[test]
fn int8_no_outliers_within_step_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let (m, k, n) = (rng.gen_range(1..6), rng.gen_range(1..12), rng.gen_range(1..6));
        let x = Tensor::<f64>::rand_uniform(&[m, k], -3.0, 3.0, &mut rng);
        let w = Tensor::<f64>::rand_uniform(&[k, n], -1.0, 1.0, &mut rng);
        let (y, p) = int8_vectorwise_matmul(&x, &w, f64::INFINITY).unwrap();
        assert!(p.outlier_columns.is_empty());
        let exact = float_matmul(&x, &w);
        for i in 0..m {
            for j in 0..n {
                // |xq·wq - x·w| <= sum |x| dw + |w| dx + dx dw, with dx, dw half steps.
                let (dx, dw) = (p.row_scales[i] / 2.0, p.col_scales[j] / 2.0);
                let bound: f64 = (0..k)
                    .map(|t| x.at(i, t).abs() * dw + w.at(t, j).abs() * dx + dx * dw)
                    .sum();
                assert!((y.at(i, j) - exact[i * n + j]).abs() <= bound + 1e-12);
            }
        }
    }
}

#[test]
fn int8_extreme_column_reproduced_exactly() {
    let x = Tensor::<f64>::from_rows(&[&[0.1, 40.0, -0.3], &[0.2, -55.5, 0.05]]);
    let (y, p) = int8_vectorwise_matmul(&x, &Tensor::eye(3), 6.0).unwrap();
    assert_eq!(p.outlier_columns, vec![1]);
    assert_eq!(y.at(0, 1), 40.0);
    assert_eq!(y.at(1, 1), -55.5);
    assert!((y.at(0, 0) - 0.1).abs() < 0.01);
}

#[test]
fn int8_rejects_shape_mismatch() {
    let x = Tensor::<f32>::zeros(&[2, 3]);
    let w = Tensor::<f32>::zeros(&[2, 3]);
    assert!(int8_vectorwise_matmul(&x, &w, 6.0).is_err());
}

#[test]
fn nf4_codebook_shape() {
    let book = Nf4Codebook::nf4();
    assert_eq!(book.len(), 16);
    assert!(book.levels.windows(2).all(|w| w[0] < w[1]));
    for i in 0..16 {
        assert_eq!(book.levels[i], -book.levels[15 - i]);
    }
    assert_eq!(book.levels[15], 1.0);
    assert!(!book.levels.contains(&0.0));
    // Φ⁻¹(16/17) / Φ⁻¹(16/17) and Φ⁻¹(9/17) / Φ⁻¹(16/17)
    assert!((book.levels[8] - 0.073_791_7 / 1.564_726_4).abs() < 1e-5);
}

#[test]
fn nf4_nearest_matches_exhaustive_argmin() {
    let book = Nf4Codebook::nf4();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..200 {
        let w: Vec<f64> = (0..64).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let q = nf4_quantize(&w, 16, &book).unwrap();
        for (b, block) in w.chunks(16).enumerate() {
            let a = q.absmax[b];
            for (i, &v) in block.iter().enumerate() {
                let x = v / a;
                let mut best = 0;
                for l in 1..16 {
                    if (x - book.levels[l]).abs() < (x - book.levels[best]).abs() {
                        best = l;
                    }
                }
                assert_eq!(q.codes[b * 16 + i] as usize, best);
            }
        }
    }
}

#[test]
fn nf4_quantize_dequantize_is_idempotent() {
    let book = Nf4Codebook::nf4();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let w: Vec<f32> = (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let q = nf4_quantize(&w, 64, &book).unwrap();
    let back = nf4_dequantize(&q, &book);
    let q2 = nf4_quantize(&back, 64, &book).unwrap();
    assert_eq!(q.codes, q2.codes);
}

#[test]
fn nf4_rejects_non_dividing_block() {
    let book = Nf4Codebook::nf4();
    assert!(nf4_quantize(&[0.0f32; 10], 4, &book).is_err());
    assert!(nf4_quantize(&[0.0f32; 10], 0, &book).is_err());
}
