use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::pack::{pack_codes, PackedTernaryMatrix, TritEncoding};
use crate::autodiff::{gelu, kernels::dot, ParamStore};
use crate::bitlinear::{BiasPolicy, BitLinearConfig, LinearSlot, QuantMode};
use crate::error::{Error, Result};
use crate::model::{choose_token, ModelConfig, SamplingConfig, Seq2SeqModel, DECODER_START_ID, EOS_ID};
use crate::quant::{absmax_scale, QuantRange};

const LN_EPS: f32 = 1e-6;

/// One stored tensor of a deployed model.
#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    Dense { shape: Vec<usize>, data: Vec<f32> },
    Packed(PackedTernaryMatrix),
}

impl Entry {
    pub fn elements(&self) -> usize {
        match self {
            Entry::Dense { data, .. } => data.len(),
            Entry::Packed(p) => p.rows() * p.cols(),
        }
    }

    fn dense(&self) -> Option<&[f32]> {
        match self {
            Entry::Dense { data, .. } => Some(data),
            Entry::Packed(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct DLinear {
    weight: usize,
    bias: Option<usize>,
    in_dim: usize,
    out_dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct DNorm {
    gain: usize,
    shift: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct DAttn {
    q: DLinear,
    k: DLinear,
    v: DLinear,
    o: DLinear,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct DEnc {
    ln_attn: DNorm,
    attn: DAttn,
    ln_ffn: DNorm,
    wi: DLinear,
    wo: DLinear,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct DDec {
    ln_self: DNorm,
    self_attn: DAttn,
    ln_cross: DNorm,
    cross_attn: DAttn,
    ln_ffn: DNorm,
    wi: DLinear,
    wo: DLinear,
}

/// Frozen inference model: ternary linears stay packed and are applied with
/// add/subtract kernels; everything else is `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeployModel {
    pub config: ModelConfig,
    pub mode: QuantMode,
    pub bit_config: BitLinearConfig,
    entries: Vec<(String, Entry)>,
    tokens: usize,
    enc_pos: usize,
    dec_pos: usize,
    encoder: Vec<DEnc>,
    enc_norm: DNorm,
    decoder: Vec<DDec>,
    dec_norm: DNorm,
    head: DLinear,
    naive_unpack: bool,
}

/// Per-block self-attention caches plus the projected encoder memory.
#[derive(Debug, Clone)]
pub struct DeployDecodeState {
    self_k: Vec<Vec<f32>>,
    self_v: Vec<Vec<f32>>,
    cross: Vec<(Vec<f32>, Vec<f32>)>,
    mem_len: usize,
    pub tokens: Vec<usize>,
    step: usize,
}

impl DeployDecodeState {
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn accept(&mut self, token: usize) {
        self.tokens.push(token);
    }
}

fn linear_names(prefix: &str) -> [String; 2] {
    [format!("{prefix}.weight"), format!("{prefix}.bias")]
}

impl DeployModel {
    /// Freezes a trained model. Weight-quantized linears are packed with
    /// `encoding`; with a tied head, the embedding table is kept dense for
    /// lookups and the head gets its own packed copy.
    pub fn from_model(model: &Seq2SeqModel<f32>, encoding: TritEncoding) -> Result<Self> {
        let store = &model.params;
        let mut entries: Vec<(String, Entry)> = Vec::new();
        let dense = |store: &ParamStore<f32>, id| {
            let t = store.get(id);
            Entry::Dense {
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            }
        };
        for (id, p) in store.iter() {
            if p.name.ends_with(".weight") && p.value.shape().len() == 2 && p.name != "embed.tokens" {
                continue;
            }
            entries.push((p.name.clone(), dense(store, id)));
        }
        let mut push_linear = |name: &str, slot: &LinearSlot| -> Result<()> {
            let entry = match slot {
                LinearSlot::Bit(b) if b.mode.quantizes_weights() => {
                    if b.ln_gain.is_some() {
                        return Err(Error::Invalid(format!("{name}: affine BitLinear norm cannot be exported")));
                    }
                    let (codes, beta) = b.ternary_weights(store);
                    Entry::Packed(pack_codes(&codes, encoding, 1.0 / beta)?)
                }
                _ => dense(store, slot.weight()),
            };
            entries.push((format!("{name}.weight"), entry));
            Ok(())
        };
        for (i, b) in model.encoder.blocks.iter().enumerate() {
            for (n, s) in [("q", &b.attn.q), ("k", &b.attn.k), ("v", &b.attn.v), ("o", &b.attn.o)] {
                push_linear(&format!("encoder.{i}.attn.{n}"), s)?;
            }
            push_linear(&format!("encoder.{i}.ffn.wi"), &b.ffn.wi)?;
            push_linear(&format!("encoder.{i}.ffn.wo"), &b.ffn.wo)?;
        }
        for (i, b) in model.decoder.blocks.iter().enumerate() {
            for (a, att) in [("self_attn", &b.self_attn), ("cross_attn", &b.cross_attn)] {
                for (n, s) in [("q", &att.q), ("k", &att.k), ("v", &att.v), ("o", &att.o)] {
                    push_linear(&format!("decoder.{i}.{a}.{n}"), s)?;
                }
            }
            push_linear(&format!("decoder.{i}.ffn.wi"), &b.ffn.wi)?;
            push_linear(&format!("decoder.{i}.ffn.wo"), &b.ffn.wo)?;
        }
        let head_quantized = model.lm_head.mode().quantizes_weights();
        if !model.config.tie_lm_head || head_quantized {
            push_linear("lm_head", &model.lm_head)?;
        }
        Self::assemble(model.config, model.mode, model.bit_config, entries)
    }

    /// Resolves the layer structure from named entries.
    pub fn assemble(config: ModelConfig, mode: QuantMode, bit_config: BitLinearConfig, entries: Vec<(String, Entry)>) -> Result<Self> {
        config.validate()?;
        let find = |name: &str| -> Result<usize> {
            entries
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| Error::Corrupt(format!("missing tensor `{name}`")))
        };
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
        let check = |idx: usize, rows: usize, cols: usize| -> Result<()> {
            let (name, e) = &entries[idx];
            let shape = match e {
                Entry::Dense { shape, .. } => shape.clone(),
                Entry::Packed(p) => vec![p.rows(), p.cols()],
            };
            let want = if cols == 0 { vec![rows] } else { vec![rows, cols] };
            if shape != want {
                return Err(Error::Mismatch {
                    field: format!("{name}.shape"),
                    expected: format!("{want:?}"),
                    found: format!("{shape:?}"),
                });
            }
            if let Entry::Packed(_) = e {
                if !mode.quantizes_weights() {
                    return Err(Error::Corrupt(format!("{name}: packed weights in {mode} mode")));
                }
            }
            Ok(())
        };
        let linear = |prefix: &str, in_dim: usize, out_dim: usize| -> Result<DLinear> {
            let [w, b] = linear_names(prefix);
            let weight = find(&w)?;
            check(weight, out_dim, in_dim)?;
            let bias = if config.linear_bias && prefix != "lm_head" {
                let i = find(&b)?;
                check(i, out_dim, 0)?;
                Some(i)
            } else {
                None
            };
            Ok(DLinear {
                weight,
                bias,
                in_dim,
                out_dim,
            })
        };
        let norm = |prefix: &str| -> Result<DNorm> {
            let gain = find(&format!("{prefix}.gain"))?;
            let shift = find(&format!("{prefix}.shift"))?;
            check(gain, d, 0)?;
            check(shift, d, 0)?;
            Ok(DNorm { gain, shift })
        };
        let attn = |prefix: &str| -> Result<DAttn> {
            Ok(DAttn {
                q: linear(&format!("{prefix}.q"), d, d)?,
                k: linear(&format!("{prefix}.k"), d, d)?,
                v: linear(&format!("{prefix}.v"), d, d)?,
                o: linear(&format!("{prefix}.o"), d, d)?,
            })
        };
        let tokens = find("embed.tokens")?;
        check(tokens, v, d)?;
        let enc_pos = find("embed.enc_pos")?;
        check(enc_pos, config.max_seq_len, d)?;
        let dec_pos = find("embed.dec_pos")?;
        check(dec_pos, config.max_seq_len, d)?;
        if entries[tokens].1.dense().is_none() || entries[enc_pos].1.dense().is_none() || entries[dec_pos].1.dense().is_none() {
            return Err(Error::Corrupt("embedding tables must be stored dense".into()));
        }
        let mut encoder = Vec::new();
        for i in 0..config.n_encoder_blocks {
            let p = format!("encoder.{i}");
            encoder.push(DEnc {
                ln_attn: norm(&format!("{p}.ln_attn"))?,
                attn: attn(&format!("{p}.attn"))?,
                ln_ffn: norm(&format!("{p}.ln_ffn"))?,
                wi: linear(&format!("{p}.ffn.wi"), d, f)?,
                wo: linear(&format!("{p}.ffn.wo"), f, d)?,
            });
        }
        let mut decoder = Vec::new();
        for i in 0..config.n_decoder_blocks {
            let p = format!("decoder.{i}");
            decoder.push(DDec {
                ln_self: norm(&format!("{p}.ln_self"))?,
                self_attn: attn(&format!("{p}.self_attn"))?,
                ln_cross: norm(&format!("{p}.ln_cross"))?,
                cross_attn: attn(&format!("{p}.cross_attn"))?,
                ln_ffn: norm(&format!("{p}.ln_ffn"))?,
                wi: linear(&format!("{p}.ffn.wi"), d, f)?,
                wo: linear(&format!("{p}.ffn.wo"), f, d)?,
            });
        }
        let head = if entries.iter().any(|(n, _)| n == "lm_head.weight") {
            linear("lm_head", d, v)?
        } else if config.tie_lm_head {
            DLinear {
                weight: tokens,
                bias: None,
                in_dim: d,
                out_dim: v,
            }
        } else {
            return Err(Error::Corrupt("missing tensor `lm_head.weight`".into()));
        };
        Ok(Self {
            enc_norm: norm("encoder.ln_final")?,
            dec_norm: norm("decoder.ln_final")?,
            config,
            mode,
            bit_config,
            tokens,
            enc_pos,
            dec_pos,
            encoder,
            decoder,
            head,
            entries,
            naive_unpack: false,
        })
    }

    pub fn entries(&self) -> &[(String, Entry)] {
        &self.entries
    }

    /// Makes packed linears unpack their weights on every call instead of
    /// using the add/subtract kernel. Only useful as a benchmark baseline.
    pub fn set_naive_unpack(&mut self, on: bool) {
        self.naive_unpack = on;
    }

    fn dense(&self, idx: usize) -> &[f32] {
        self.entries[idx].1.dense().expect("dense tensor")
    }

    /// `x: [n × in]` → `[n × out]` following the layer's quantization mode.
    fn linear(&self, l: &DLinear, x: &[f32]) -> Vec<f32> {
        let n = x.len() / l.in_dim;
        let eps = self.bit_config.eps as f32;
        let quant_act = self.mode.quantizes_activations();
        let policy = self.bit_config.bias_policy;
        let bias = l.bias.map(|b| self.dense(b));
        let unpacked;
        let weights = match &self.entries[l.weight].1 {
            Entry::Packed(p) if self.naive_unpack => {
                unpacked = p.unpack_f32();
                Some(&unpacked[..])
            }
            Entry::Packed(_) => None,
            Entry::Dense { data, .. } => Some(&data[..]),
        };
        let mut out = Vec::with_capacity(n * l.out_dim);
        let mut row_in = vec![0.0f32; l.in_dim];
        for r in 0..n {
            let xr = &x[r * l.in_dim..(r + 1) * l.in_dim];
            let gamma = if quant_act {
                let xn = layer_norm_row(xr, eps);
                let g = absmax_scale(&xn, QuantRange::INT8, eps);
                for (o, v) in row_in.iter_mut().zip(&xn) {
                    *o = QuantRange::INT8.round_clamp(g * v) as f32;
                }
                Some(g)
            } else {
                row_in.copy_from_slice(xr);
                None
            };
            let beta_inv = match &self.entries[l.weight].1 {
                Entry::Packed(p) => Some(p.scale()),
                Entry::Dense { .. } => None,
            };
            // Combined 1/(βγ) as computed during training.
            let scale = match (gamma, beta_inv) {
                (None, None) => None,
                (None, Some(s)) => Some(s),
                (Some(g), b) => {
                    let beta = b.map_or(1.0, |s| 1.0 / s);
                    Some(1.0 / (beta * g))
                }
            };
            for j in 0..l.out_dim {
                let acc = match (weights, &self.entries[l.weight].1) {
                    (Some(w), _) => dot(&row_in, &w[j * l.in_dim..(j + 1) * l.in_dim]),
                    (None, Entry::Packed(p)) => p.row_dot(j, &row_in),
                    (None, Entry::Dense { .. }) => unreachable!("dense weights always resolve"),
                };
                let b = bias.map_or(0.0, |b| b[j]);
                let y = match (scale, policy) {
                    (None, _) => acc + b,
                    (Some(s), BiasPolicy::Literal) => (acc + b) * s,
                    (Some(s), BiasPolicy::PostDequant) => acc * s + b,
                };
                out.push(y);
            }
        }
        out
    }

    fn norm(&self, n: &DNorm, x: &[f32]) -> Vec<f32> {
        let (g, s) = (self.dense(n.gain), self.dense(n.shift));
        let d = g.len();
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks(d) {
            let xn = layer_norm_row(row, LN_EPS);
            out.extend(xn.iter().zip(g).zip(s).map(|((v, g), s)| v * g + s));
        }
        out
    }

    fn embed(&self, ids: &[usize], positions: usize, offset: usize) -> Vec<f32> {
        let d = self.config.d_model;
        let (t, p) = (self.dense(self.tokens), self.dense(positions));
        let mut out = Vec::with_capacity(ids.len() * d);
        for (i, &id) in ids.iter().enumerate() {
            let pos = offset + i;
            out.extend(t[id * d..(id + 1) * d].iter().zip(&p[pos * d..(pos + 1) * d]).map(|(a, b)| a + b));
        }
        out
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Invalid("empty token sequence".into()));
        }
        if ids.len() > self.config.max_seq_len {
            return Err(Error::SeqLength {
                len: ids.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Index {
                op: "token id",
                index: bad,
                bound: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Encoder memory `[len × d_model]`, row-major.
    pub fn encode(&self, src: &[usize]) -> Result<Vec<f32>> {
        self.check_ids(src)?;
        let (d, h) = (self.config.d_model, self.config.n_heads);
        let mut x = self.embed(src, self.enc_pos, 0);
        for b in &self.encoder {
            let a = self.norm(&b.ln_attn, &x);
            let q = self.linear(&b.attn.q, &a);
            let k = self.linear(&b.attn.k, &a);
            let v = self.linear(&b.attn.v, &a);
            let ctx = attention(&q, &k, &v, d, h);
            add_assign(&mut x, &self.linear(&b.attn.o, &ctx));
            let f = self.norm(&b.ln_ffn, &x);
            let f = self.linear(&b.wi, &f).into_iter().map(gelu).collect::<Vec<_>>();
            add_assign(&mut x, &self.linear(&b.wo, &f));
        }
        Ok(self.norm(&self.enc_norm, &x))
    }

    pub fn new_decode_state(&self, memory: &[f32]) -> DeployDecodeState {
        let cross = self
            .decoder
            .iter()
            .map(|b| (self.linear(&b.cross_attn.k, memory), self.linear(&b.cross_attn.v, memory)))
            .collect();
        DeployDecodeState {
            self_k: vec![Vec::new(); self.decoder.len()],
            self_v: vec![Vec::new(); self.decoder.len()],
            cross,
            mem_len: memory.len() / self.config.d_model,
            tokens: Vec::new(),
            step: 0,
        }
    }

    /// Next-token logits, feeding the last accepted token (or the start
    /// token) and extending the caches by one position.
    pub fn decode_step(&self, state: &mut DeployDecodeState) -> Result<Vec<f32>> {
        if state.tokens.len() != state.step {
            return Err(Error::Invalid(format!(
                "decode state has {} tokens at step {}; call accept() once per step",
                state.tokens.len(),
                state.step
            )));
        }
        let pos = state.step;
        if pos >= self.config.max_seq_len {
            return Err(Error::SeqLength {
                len: pos + 1,
                max: self.config.max_seq_len,
            });
        }
        let tok = if pos == 0 { DECODER_START_ID } else { state.tokens[pos - 1] };
        self.check_ids(&[tok])?;
        let (d, h) = (self.config.d_model, self.config.n_heads);
        let mut x = self.embed(&[tok], self.dec_pos, pos);
        for (l, b) in self.decoder.iter().enumerate() {
            let a = self.norm(&b.ln_self, &x);
            let q = self.linear(&b.self_attn.q, &a);
            state.self_k[l].extend(self.linear(&b.self_attn.k, &a));
            state.self_v[l].extend(self.linear(&b.self_attn.v, &a));
            let ctx = attention(&q, &state.self_k[l], &state.self_v[l], d, h);
            add_assign(&mut x, &self.linear(&b.self_attn.o, &ctx));

            let c = self.norm(&b.ln_cross, &x);
            let cq = self.linear(&b.cross_attn.q, &c);
            let (ck, cv) = &state.cross[l];
            debug_assert_eq!(ck.len(), state.mem_len * d);
            let ctx = attention(&cq, ck, cv, d, h);
            add_assign(&mut x, &self.linear(&b.cross_attn.o, &ctx));

            let f = self.norm(&b.ln_ffn, &x);
            let f = self.linear(&b.wi, &f).into_iter().map(gelu).collect::<Vec<_>>();
            add_assign(&mut x, &self.linear(&b.wo, &f));
        }
        let x = self.norm(&self.dec_norm, &x);
        state.step += 1;
        Ok(self.linear(&self.head, &x))
    }

    /// Teacher-forced logits `[len(tgt_in) × vocab]`, computed step by step.
    pub fn forward(&self, src: &[usize], tgt_in: &[usize]) -> Result<Vec<f32>> {
        self.check_ids(tgt_in)?;
        if tgt_in[0] != DECODER_START_ID {
            return Err(Error::Invalid("decoder input must begin with the start token".into()));
        }
        let memory = self.encode(src)?;
        let mut state = self.new_decode_state(&memory);
        let mut out = Vec::with_capacity(tgt_in.len() * self.config.vocab_size);
        for i in 0..tgt_in.len() {
            out.extend(self.decode_step(&mut state)?);
            if i + 1 < tgt_in.len() {
                state.accept(tgt_in[i + 1]);
            }
        }
        Ok(out)
    }

    /// Same stopping rules and RNG stream as [`Seq2SeqModel::sample`].
    pub fn sample(&self, src: &[usize], cfg: &SamplingConfig) -> Result<Vec<usize>> {
        if !(cfg.temperature >= 0.0) {
            return Err(Error::Invalid(format!("temperature must be >= 0, got {}", cfg.temperature)));
        }
        let memory = self.encode(src)?;
        let mut state = self.new_decode_state(&memory);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let budget = cfg.max_new_tokens.min(self.config.max_seq_len);
        while state.step() < budget {
            let logits = self.decode_step(&mut state)?;
            let tok = choose_token(&logits, cfg.temperature, &mut rng);
            if tok == EOS_ID {
                break;
            }
            state.accept(tok);
        }
        Ok(state.tokens)
    }
}

fn layer_norm_row(x: &[f32], eps: f32) -> Vec<f32> {
    let n = x.len() as f32;
    let mean = x.iter().copied().sum::<f32>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
    let is = 1.0 / (var + eps).sqrt();
    x.iter().map(|v| (v - mean) * is).collect()
}

fn add_assign(x: &mut [f32], y: &[f32]) {
    x.iter_mut().zip(y).for_each(|(a, b)| *a += b);
}

/// Unmasked multi-head attention of every query row over every key row.
fn attention(q: &[f32], k: &[f32], v: &[f32], d: usize, n_heads: usize) -> Vec<f32> {
    let dh = d / n_heads;
    let (nq, nk) = (q.len() / d, k.len() / d);
    let scale = 1.0 / (dh as f32).sqrt();
    let mut out = vec![0.0f32; nq * d];
    let mut scores = vec![0.0f32; nk];
    for i in 0..nq {
        for h in 0..n_heads {
            let qh = &q[i * d + h * dh..i * d + (h + 1) * dh];
            for (j, s) in scores.iter_mut().enumerate() {
                *s = dot(qh, &k[j * d + h * dh..j * d + (h + 1) * dh]) * scale;
            }
            crate::autodiff::softmax_in_place(&mut scores);
            let o = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
            for (j, &p) in scores.iter().enumerate() {
                for (ov, vv) in o.iter_mut().zip(&v[j * d + h * dh..j * d + (h + 1) * dh]) {
                    *ov += p * vv;
                }
            }
        }
    }
    out
}
