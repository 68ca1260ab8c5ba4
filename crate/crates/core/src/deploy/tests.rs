use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::Tape;
use crate::bitlinear::{BiasPolicy, BitLinearConfig, QuantMode};
use crate::error::Error;
use crate::model::{build_model, ModelConfig, SamplingConfig, Seq2SeqModel, DECODER_START_ID};

fn random_trits(rng: &mut ChaCha8Rng, n: usize) -> Vec<i8> {
    (0..n).map(|_| rng.gen_range(-1i8..=1)).collect()
}

/// Independent base-3 decoder for one base243 byte.
fn base3_digits(mut b: u32) -> [i8; 5] {
    let mut out = [0i8; 5];
    for o in &mut out {
        *o = (b % 3) as i8 - 1;
        b /= 3;
    }
    out
}

#[test]
fn base243_hand_example_is_140() {
    let p = pack(&[1, 0, -1, 1, 0], 1, 5, TritEncoding::Base243, 1.0).unwrap();
    assert_eq!(p.payload(), &[2 + 3 + 2 * 27 + 81]);
    assert_eq!(p.payload(), &[140]);
    assert_eq!(base3_digits(140), [1, 0, -1, 1, 0]);
}

#[test]
fn two_bit_layout_is_little_endian_within_byte() {
    let p = pack(&[1, -1, 0, 1, -1], 1, 5, TritEncoding::TwoBit, 1.0).unwrap();
    // byte 0: 01 | 10<<2 | 00<<4 | 01<<6; byte 1: 10 then padding.
    assert_eq!(p.payload(), &[0b01_00_10_01, 0b10]);
}

#[test]
fn all_zero_matrix_payloads() {
    let zeros = vec![0i8; 6 * 11];
    let two = pack(&zeros, 6, 11, TritEncoding::TwoBit, 1.0).unwrap();
    assert!(two.payload().iter().all(|&b| b == 0));
    // Zero trits are digit 1 in every base-3 place: 1+3+9+27+81.
    let b243 = pack(&zeros, 6, 11, TritEncoding::Base243, 1.0).unwrap();
    assert!(b243.payload().iter().all(|&b| b == 121));
    assert!(two.unpack().iter().chain(b243.unpack().iter()).all(|&t| t == 0));
}

#[test]
fn payload_lengths() {
    for (r, c) in [(1, 1), (3, 4), (3, 5), (7, 13), (2, 64)] {
        let codes = vec![1i8; r * c];
        assert_eq!(pack(&codes, r, c, TritEncoding::TwoBit, 1.0).unwrap().payload().len(), r * c.div_ceil(4));
        assert_eq!(pack(&codes, r, c, TritEncoding::Base243, 1.0).unwrap().payload().len(), r * c.div_ceil(5));
    }
}

#[test]
fn random_7x13_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let t = random_trits(&mut rng, 7 * 13);
    for enc in [TritEncoding::TwoBit, TritEncoding::Base243] {
        let p = pack(&t, 7, 13, enc, 0.5).unwrap();
        assert_eq!(p.unpack(), t, "{enc}");
        let again = PackedTernaryMatrix::from_parts(7, 13, enc, p.payload().to_vec(), 0.5).unwrap();
        assert_eq!(again, p);
    }
}

proptest! {
    #[test]
    fn round_trip_any_shape(rows in 1usize..=64, cols in 1usize..=64, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = random_trits(&mut rng, rows * cols);
        for enc in [TritEncoding::TwoBit, TritEncoding::Base243] {
            prop_assert_eq!(pack(&t, rows, cols, enc, 1.0).unwrap().unpack(), t.clone());
        }
    }
}

#[test]
fn non_ternary_entries_report_coordinates() {
    let mut codes = vec![0i8; 12];
    codes[7] = 2;
    match pack(&codes, 3, 4, TritEncoding::TwoBit, 1.0) {
        Err(Error::NotTernary { row, col, value }) => assert_eq!((row, col, value), (1, 3, 2.0)),
        other => panic!("{other:?}"),
    }
    let mut f = vec![1.0f32; 6];
    f[4] = 0.5;
    match pack_f32(&f, 2, 3, TritEncoding::Base243, 1.0) {
        Err(Error::NotTernary { row, col, value }) => assert_eq!((row, col, value), (1, 1, 0.5)),
        other => panic!("{other:?}"),
    }
}

#[test]
fn from_parts_rejects_bad_payloads() {
    assert!(matches!(
        PackedTernaryMatrix::from_parts(2, 4, TritEncoding::TwoBit, vec![0; 3], 1.0),
        Err(Error::Mismatch { .. })
    ));
    assert!(matches!(
        PackedTernaryMatrix::from_parts(1, 4, TritEncoding::TwoBit, vec![0b11], 1.0),
        Err(Error::Corrupt(_))
    ));
    assert!(matches!(
        PackedTernaryMatrix::from_parts(1, 5, TritEncoding::Base243, vec![243], 1.0),
        Err(Error::Corrupt(_))
    ));
}

#[test]
fn encoding_names_parse() {
    for enc in [TritEncoding::TwoBit, TritEncoding::Base243] {
        assert_eq!(enc.to_string().parse::<TritEncoding>().unwrap(), enc);
        assert_eq!(TritEncoding::from_tag(enc.tag()), Some(enc));
    }
    assert!("three_bit".parse::<TritEncoding>().is_err());
}

/// Straightforward float matmul on explicit trits.
fn oracle(t: &[i8], rows: usize, cols: usize, x: &[f32], bias: &[f32], scale: f32, policy: BiasPolicy) -> Vec<f32> {
    (0..rows)
        .map(|r| {
            let acc: f32 = (0..cols).map(|c| t[r * cols + c] as f32 * x[c]).sum();
            match policy {
                BiasPolicy::Literal => (acc + bias[r]) * scale,
                BiasPolicy::PostDequant => acc * scale + bias[r],
            }
        })
        .collect()
}

#[test]
fn signed_identity_rows_pick_signed_entries() {
    // Row i holds ±1 at column i.
    let n = 6;
    let signs = [1i8, -1, 1, 1, -1, -1];
    let mut t = vec![0i8; n * n];
    for i in 0..n {
        t[i * n + i] = signs[i];
    }
    let x: Vec<f32> = (0..n).map(|i| i as f32 * 0.5 - 1.0).collect();
    let zeros = vec![0.0; n];
    for enc in [TritEncoding::TwoBit, TritEncoding::Base243] {
        let p = pack(&t, n, n, enc, 1.0).unwrap();
        let y = packed_matvec(&p, &x, None, BiasPolicy::Literal).unwrap();
        let want: Vec<f32> = (0..n).map(|i| signs[i] as f32 * x[i]).collect();
        assert_eq!(y, want);
        assert_eq!(y, oracle(&t, n, n, &x, &zeros, 1.0, BiasPolicy::Literal));
    }
}

#[test]
fn zero_input_gives_scaled_or_raw_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t = random_trits(&mut rng, 4 * 9);
    let beta = 2.5f32;
    let p = pack(&t, 4, 9, TritEncoding::TwoBit, 1.0 / beta).unwrap();
    let b = [0.5f32, -1.0, 2.0, 0.25];
    let x = vec![0.0; 9];
    let lit = packed_matvec(&p, &x, Some(&b), BiasPolicy::Literal).unwrap();
    let post = packed_matvec(&p, &x, Some(&b), BiasPolicy::PostDequant).unwrap();
    for i in 0..4 {
        assert!((lit[i] - b[i] / beta).abs() < 1e-7);
        assert_eq!(post[i], b[i]);
    }
}

#[test]
fn matvec_matches_reference_512() {
    let mut rng = ChaCha8Rng::seed_from_u64(512);
    let (r, c) = (512, 512);
    let t = random_trits(&mut rng, r * c);
    let x: Vec<f32> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b: Vec<f32> = (0..r).map(|_| rng.gen_range(-1.0..1.0)).collect();
    for enc in [TritEncoding::TwoBit, TritEncoding::Base243] {
        let p = pack(&t, r, c, enc, 0.37).unwrap();
        for policy in [BiasPolicy::Literal, BiasPolicy::PostDequant] {
            let y = packed_matvec(&p, &x, Some(&b), policy).unwrap();
            let reference = unpacked_matvec(&p, &x, Some(&b), policy).unwrap();
            let o = oracle(&t, r, c, &x, &b, 0.37, policy);
            for i in 0..r {
                assert!((y[i] - reference[i]).abs() <= 1e-5, "{enc} {policy:?} row {i}");
                assert!((y[i] - o[i]).abs() <= 1e-4);
            }
        }
    }
}

#[test]
fn matvec_dimension_errors() {
    let p = pack(&[1, 0, -1, 1, 0, 0], 2, 3, TritEncoding::TwoBit, 1.0).unwrap();
    assert!(matches!(packed_matvec(&p, &[1.0; 4], None, BiasPolicy::Literal), Err(Error::Shape { .. })));
    assert!(matches!(packed_matvec(&p, &[1.0; 3], Some(&[0.0; 3]), BiasPolicy::Literal), Err(Error::Shape { .. })));
    let m = packed_matmul(&p, &[1.0, 2.0, 3.0, -1.0, 0.0, 1.0], None, BiasPolicy::Literal).unwrap();
    assert_eq!(m, vec![-2.0, 1.0, -2.0, -1.0]);
}

fn toy(mode: QuantMode, tie: bool, bias: BiasPolicy, seed: u64) -> Seq2SeqModel<f32> {
    let cfg = ModelConfig {
        n_encoder_blocks: 2,
        n_decoder_blocks: 2,
        d_model: 32,
        d_ff: 64,
        n_heads: 4,
        vocab_size: 40,
        max_seq_len: 32,
        tie_lm_head: tie,
        linear_bias: true,
    };
    let bit = BitLinearConfig {
        bias_policy: bias,
        ..BitLinearConfig::default()
    };
    let mut m = build_model::<f32>(cfg, mode, bit, seed).unwrap();
    // Spread weights and biases so logits are not all near zero.
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let ids: Vec<_> = m.params.ids().collect();
    for id in ids {
        for v in m.params.get_mut(id).data_mut() {
            *v += rng.gen_range(-0.2..0.2);
        }
    }
    m
}

fn qat_logits(m: &Seq2SeqModel<f32>, src: &[usize], tgt_in: &[usize]) -> Vec<f32> {
    let mut tape = Tape::with_params(&m.params);
    let v = m.forward(&mut tape, &[src], &[tgt_in]).unwrap();
    tape.value(v).data().to_vec()
}

#[test]
fn deploy_logits_match_qat_forward() {
    let src = [5usize, 9, 2, 31, 7, 7, 12];
    let tgt_in = [DECODER_START_ID, 3, 17, 22, 4, 1];
    for mode in [QuantMode::Weight, QuantMode::Both, QuantMode::Activ, QuantMode::None] {
        for tie in [true, false] {
            for policy in [BiasPolicy::Literal, BiasPolicy::PostDequant] {
                let m = toy(mode, tie, policy, 11);
                let want = qat_logits(&m, &src, &tgt_in);
                for enc in [TritEncoding::TwoBit, TritEncoding::Base243] {
                    let d = DeployModel::from_model(&m, enc).unwrap();
                    let got = d.forward(&src, &tgt_in).unwrap();
                    assert_eq!(got.len(), want.len());
                    let worst = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
                    assert!(worst <= 1e-4, "{mode:?} tie={tie} {policy:?} {enc}: {worst}");
                }
            }
        }
    }
}

#[test]
fn weight_mode_packs_every_linear() {
    let m = toy(QuantMode::Weight, true, BiasPolicy::Literal, 1);
    let d = DeployModel::from_model(&m, TritEncoding::TwoBit).unwrap();
    let packed: Vec<_> = d
        .entries()
        .iter()
        .filter(|(_, e)| matches!(e, Entry::Packed(_)))
        .map(|(n, _)| n.as_str())
        .collect();
    // 2·6 encoder + 2·10 decoder + head.
    assert_eq!(packed.len(), 33);
    assert!(packed.contains(&"lm_head.weight"));
    assert!(matches!(d.entries().iter().find(|(n, _)| n == "embed.tokens").unwrap().1, Entry::Dense { .. }));

    let none = toy(QuantMode::None, true, BiasPolicy::Literal, 1);
    let d = DeployModel::from_model(&none, TritEncoding::TwoBit).unwrap();
    assert!(d.entries().iter().all(|(_, e)| matches!(e, Entry::Dense { .. })));
    assert!(d.entries().iter().all(|(n, _)| n != "lm_head.weight"));
}

#[test]
fn sample_is_seeded_and_ends_at_eos_or_limit() {
    let m = toy(QuantMode::Weight, true, BiasPolicy::Literal, 4);
    let d = DeployModel::from_model(&m, TritEncoding::TwoBit).unwrap();
    let cfg = SamplingConfig {
        temperature: 0.7,
        max_new_tokens: 12,
        seed: 9,
    };
    let a = d.sample(&[4, 5, 6], &cfg).unwrap();
    assert_eq!(a, d.sample(&[4, 5, 6], &cfg).unwrap());
    assert!(a.len() <= 12);
    assert!(d.sample(&[], &cfg).is_err());
    assert!(d.sample(&[400], &cfg).is_err());
}

#[test]
fn export_round_trip() {
    let m = toy(QuantMode::Weight, true, BiasPolicy::PostDequant, 2);
    for enc in [TritEncoding::TwoBit, TritEncoding::Base243] {
        let d = DeployModel::from_model(&m, enc).unwrap();
        let bytes = encode_export(&d);
        let back = decode_export(&bytes).unwrap();
        assert_eq!(encode_export(&back), bytes);
        assert_eq!(back.entries(), d.entries());
        let (src, tgt) = ([3usize, 4, 5], [DECODER_START_ID, 8, 9]);
        assert_eq!(back.forward(&src, &tgt).unwrap(), d.forward(&src, &tgt).unwrap());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ttd");
        save_export(&d, &path).unwrap();
        assert_eq!(load_export(&path).unwrap().entries(), d.entries());
    }
}

#[test]
fn corrupt_exports_are_rejected() {
    let m = toy(QuantMode::Weight, true, BiasPolicy::Literal, 2);
    let bytes = encode_export(&DeployModel::from_model(&m, TritEncoding::TwoBit).unwrap());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_export(&bad), Err(Error::Corrupt(_))));
    assert!(decode_export(&bytes[..bytes.len() - 3]).is_err());
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(decode_export(&long), Err(Error::Corrupt(_))));
    let mut ver = bytes;
    ver[8] = 9;
    assert!(matches!(decode_export(&ver), Err(Error::Mismatch { .. })));
    assert!(load_export("/nonexistent/model.ttd").is_err());
}

#[test]
fn memory_report_is_internally_consistent() {
    let m = toy(QuantMode::Weight, true, BiasPolicy::Literal, 0);
    let d = DeployModel::from_model(&m, TritEncoding::TwoBit).unwrap();
    let r = memory_report(&d, 2);
    assert_eq!(r.dense_total(), r.tensors.iter().map(|t| t.dense_bytes).sum::<usize>());
    assert_eq!(r.deployed_total(), r.tensors.iter().map(|t| t.deployed_bytes).sum::<usize>());
    for t in &r.tensors {
        let (_, e) = d.entries().iter().find(|(n, _)| *n == t.name).unwrap();
        assert_eq!(t.elements, e.elements());
        assert_eq!(t.dense_bytes, 2 * t.elements);
        match e {
            Entry::Packed(p) => assert_eq!(t.deployed_bytes, p.payload().len() + 4),
            Entry::Dense { .. } => assert_eq!(t.deployed_bytes, t.dense_bytes),
        }
    }
    let csv = r.to_csv();
    assert!(csv.starts_with("name,elements,packed,dense_bytes,deployed_bytes\n"));
    assert!(csv.trim_end().ends_with(&format!(",{},{}", r.dense_total(), r.deployed_total())));
}

#[test]
fn packed_tensors_use_at_most_2_25_bits_per_weight() {
    // 32×32 .. 128×512: every tensor of at least 1024 elements with a
    // column count divisible by 4 packs at 2 bits plus the scale.
    for (rows, cols) in [(32, 32), (64, 64), (128, 512), (512, 128), (200, 64)] {
        let p = pack(&vec![1i8; rows * cols], rows, cols, TritEncoding::TwoBit, 1.0).unwrap();
        let t = tensor_bytes("w", &Entry::Packed(p), 2);
        let bits = t.deployed_bytes as f64 * 8.0 / t.elements as f64;
        assert!(bits <= 2.25, "{rows}x{cols}: {bits}");
        assert!(t.dense_bytes as f64 / t.deployed_bytes as f64 >= 7.0);
    }
    let m = toy(QuantMode::Weight, true, BiasPolicy::Literal, 0);
    let d = DeployModel::from_model(&m, TritEncoding::TwoBit).unwrap();
    for t in memory_report(&d, 2).tensors.iter().filter(|t| t.packed && t.elements >= 1024) {
        assert!(t.dense_bytes >= 7 * t.deployed_bytes, "{}", t.name);
    }
}

#[test]
fn no_packed_linears_means_equal_sizes() {
    let m = toy(QuantMode::None, false, BiasPolicy::Literal, 0);
    let r = memory_report(&DeployModel::from_model(&m, TritEncoding::TwoBit).unwrap(), 2);
    assert_eq!(r.dense_total(), r.deployed_total());
    assert_eq!(r.ratio(), 1.0);
    let m = toy(QuantMode::Activ, true, BiasPolicy::Literal, 0);
    let r = memory_report(&DeployModel::from_model(&m, TritEncoding::TwoBit).unwrap(), 2);
    assert_eq!(r.dense_total(), r.deployed_total());
}

#[test]
fn ratio_decreases_with_d_ff() {
    let mut last = f64::INFINITY;
    for d_ff in [32, 64, 128, 256, 512] {
        let cfg = ModelConfig {
            d_ff,
            ..ModelConfig::tiny(50)
        };
        let m = build_model::<f32>(cfg, QuantMode::Weight, BitLinearConfig::default(), 0).unwrap();
        let ratio = memory_report(&DeployModel::from_model(&m, TritEncoding::TwoBit).unwrap(), 2).ratio();
        assert!(ratio < last, "d_ff {d_ff}: {ratio} !< {last}");
        last = ratio;
    }
}

#[test]
fn summary_of_one_measurement() {
    let r = summarize(&[12.5], &[7], 100).unwrap();
    assert_eq!((r.mean_ms, r.p50_ms, r.p95_ms, r.total_ms), (12.5, 12.5, 12.5, 12.5));
    assert_eq!(r.seq_per_s, 1000.0 / 12.5);
    assert_eq!(r.mean_tokens, 7.0);
    let r = summarize(&[4.0, 1.0, 3.0, 2.0], &[1, 1, 1, 1], 0).unwrap();
    assert_eq!((r.mean_ms, r.p50_ms, r.p95_ms), (2.5, 2.5, 4.0));
    assert!(summarize(&[], &[], 0).is_err());
}

#[test]
fn bench_report_is_consistent() {
    let m = toy(QuantMode::Weight, true, BiasPolicy::Literal, 5);
    let d = DeployModel::from_model(&m, TritEncoding::TwoBit).unwrap();
    let cfg = BenchConfig {
        repeats: 5,
        warmup: 1,
        sampling: SamplingConfig {
            temperature: 0.7,
            max_new_tokens: 12,
            seed: 0,
        },
    };
    let r = bench(&d, &[3, 4, 5, 6], &cfg, 1234).unwrap();
    assert_eq!(r.repeats, 5);
    assert_eq!(r.bytes_total, 1234);
    assert!((r.seq_per_s - 5.0 / (r.total_ms / 1000.0)).abs() <= 1e-9 * r.seq_per_s);
    assert!(r.p50_ms <= r.p95_ms);
    let json: serde_json::Value = serde_json::to_value(&r).unwrap();
    for k in ["mean_ms", "p50_ms", "p95_ms", "seq_per_s", "bytes_total"] {
        assert!(json.get(k).is_some(), "{k}");
    }
}
