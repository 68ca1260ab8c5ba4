//! T5-shaped encoder-decoder with learned absolute positions, pre-norm
//! blocks and an LM head tied to the token embedding.
//!
//! Samples in a batch are stacked row-wise without padding; attention runs
//! per sample on its own row range.

mod checkpoint;
mod decode;
mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) use checkpoint::{decode_config_block, encode_config_block, Reader, Writer};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use decode::{choose_token, DecodeState, SamplingConfig};
pub use layers::{multi_head, Attention, DecoderBlock, EncoderBlock, FeedForward, Norm, Segment, Stack};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::bitlinear::{set_linear_mode, BitLinearConfig, Child, ChildMut, LinearLayer, LinearSlot, Module, QuantMode};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use layers::DecoderKv;

pub const PAD_ID: usize = 0;
pub const EOS_ID: usize = 1;
/// First decoder input.
pub const DECODER_START_ID: usize = PAD_ID;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_encoder_blocks: usize,
    pub n_decoder_blocks: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub tie_lm_head: bool,
    pub linear_bias: bool,
}

impl ModelConfig {
    pub fn t5_small(vocab_size: usize) -> Self {
        Self {
            n_encoder_blocks: 6,
            n_decoder_blocks: 6,
            d_model: 512,
            d_ff: 2048,
            n_heads: 8,
            vocab_size,
            max_seq_len: 512,
            tie_lm_head: true,
            linear_bias: true,
        }
    }

    /// Small configuration that trains in seconds on one core.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            n_encoder_blocks: 2,
            n_decoder_blocks: 2,
            d_model: 64,
            d_ff: 128,
            n_heads: 4,
            vocab_size,
            max_seq_len: 256,
            tie_lm_head: true,
            linear_bias: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.max_seq_len == 0 {
            return bad(format!("zero-sized model dimension in {self:?}"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.vocab_size <= EOS_ID {
            return bad(format!("vocab_size {} leaves no room for special tokens", self.vocab_size));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Standard deviation of the scaled normal initialization.
    pub fn init_std(&self) -> f64 {
        let blocks = (self.n_encoder_blocks + self.n_decoder_blocks).max(1);
        0.02 / (2.0 * blocks as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Seq2SeqModel<T> {
    pub config: ModelConfig,
    pub mode: QuantMode,
    pub bit_config: BitLinearConfig,
    pub params: ParamStore<T>,
    pub token_embedding: ParamId,
    pub encoder_positions: ParamId,
    pub decoder_positions: ParamId,
    pub encoder: Stack<EncoderBlock>,
    pub encoder_norm: Norm,
    pub decoder: Stack<DecoderBlock>,
    pub decoder_norm: Norm,
    pub lm_head: LinearSlot,
}

/// Builds a freshly initialized model and swaps its linears for `mode`.
pub fn build_model<T: Scalar>(config: ModelConfig, mode: QuantMode, bit: BitLinearConfig, seed: u64) -> Result<Seq2SeqModel<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let (d, std, bias) = (config.d_model, config.init_std(), config.linear_bias);

    let token_embedding = store.add("embed.tokens", Tensor::randn(&[config.vocab_size, d], 0.02, &mut rng), true);
    let encoder_positions = store.add("embed.enc_pos", Tensor::randn(&[config.max_seq_len, d], 0.02, &mut rng), true);
    let decoder_positions = store.add("embed.dec_pos", Tensor::randn(&[config.max_seq_len, d], 0.02, &mut rng), true);

    let mut enc = Vec::with_capacity(config.n_encoder_blocks);
    for i in 0..config.n_encoder_blocks {
        let p = format!("encoder.{i}");
        enc.push(EncoderBlock {
            ln_attn: Norm::init(&mut store, &format!("{p}.ln_attn"), d),
            attn: Attention::init(&mut store, &format!("{p}.attn"), d, bias, std, &mut rng),
            ln_ffn: Norm::init(&mut store, &format!("{p}.ln_ffn"), d),
            ffn: FeedForward::init(&mut store, &format!("{p}.ffn"), d, config.d_ff, bias, std, &mut rng),
        });
    }
    let encoder_norm = Norm::init(&mut store, "encoder.ln_final", d);

    let mut dec = Vec::with_capacity(config.n_decoder_blocks);
    for i in 0..config.n_decoder_blocks {
        let p = format!("decoder.{i}");
        dec.push(DecoderBlock {
            ln_self: Norm::init(&mut store, &format!("{p}.ln_self"), d),
            self_attn: Attention::init(&mut store, &format!("{p}.self_attn"), d, bias, std, &mut rng),
            ln_cross: Norm::init(&mut store, &format!("{p}.ln_cross"), d),
            cross_attn: Attention::init(&mut store, &format!("{p}.cross_attn"), d, bias, std, &mut rng),
            ln_ffn: Norm::init(&mut store, &format!("{p}.ln_ffn"), d),
            ffn: FeedForward::init(&mut store, &format!("{p}.ffn"), d, config.d_ff, bias, std, &mut rng),
        });
    }
    let decoder_norm = Norm::init(&mut store, "decoder.ln_final", d);

    let lm_head = if config.tie_lm_head {
        LinearSlot::Plain(LinearLayer {
            weight: token_embedding,
            bias: None,
            in_dim: d,
            out_dim: config.vocab_size,
        })
    } else {
        LinearSlot::Plain(LinearLayer::init(&mut store, "lm_head", d, config.vocab_size, false, 0.02, &mut rng))
    };

    let mut model = Seq2SeqModel {
        config,
        mode: QuantMode::None,
        bit_config: bit,
        params: store,
        token_embedding,
        encoder_positions,
        decoder_positions,
        encoder: Stack { blocks: enc },
        encoder_norm,
        decoder: Stack { blocks: dec },
        decoder_norm,
        lm_head,
    };
    model.set_mode(mode);
    Ok(model)
}

impl<T: Scalar> Seq2SeqModel<T> {
    /// Switches every linear site to `mode`, keeping the parameters.
    pub fn set_mode(&mut self, mode: QuantMode) {
        let bit = self.bit_config;
        set_linear_mode(self, mode, &bit);
        self.mode = mode;
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

    /// Token plus position embeddings for stacked sequences.
    fn embed(&self, tape: &mut Tape<'_, T>, seqs: &[&[usize]], positions: ParamId, offset: usize) -> Result<(Var, Vec<Segment>)> {
        let mut ids = Vec::new();
        let mut pos = Vec::new();
        let mut segs = Vec::with_capacity(seqs.len());
        for s in seqs {
            segs.push((ids.len(), s.len()));
            ids.extend_from_slice(s);
            pos.extend(offset..offset + s.len());
        }
        let table = tape.param(self.token_embedding);
        let te = tape.embedding(table, &ids)?;
        let ptable = tape.param(positions);
        let pe = tape.embedding(ptable, &pos)?;
        Ok((tape.add(te, pe)?, segs))
    }

    /// Encoder output for stacked sources, with per-sample segments.
    pub fn encode_batch(&self, tape: &mut Tape<'_, T>, srcs: &[&[usize]]) -> Result<(Var, Vec<Segment>)> {
        for s in srcs {
            self.check_ids(s)?;
        }
        let (mut h, segs) = self.embed(tape, srcs, self.encoder_positions, 0)?;
        for block in &self.encoder.blocks {
            h = block.forward(tape, h, &segs, self.config.n_heads)?;
        }
        Ok((self.encoder_norm.forward(tape, h)?, segs))
    }

    /// Teacher-forced logits `[Σ len(tgt_in), vocab]` for a batch.
    pub fn forward(&self, tape: &mut Tape<'_, T>, srcs: &[&[usize]], tgt_in: &[&[usize]]) -> Result<Var> {
        if srcs.len() != tgt_in.len() {
            return Err(Error::shape("forward", &[srcs.len()], &[tgt_in.len()]));
        }
        let (memory, mem_segs) = self.encode_batch(tape, srcs)?;
        for t in tgt_in {
            self.check_ids(t)?;
        }
        let (mut h, segs) = self.embed(tape, tgt_in, self.decoder_positions, 0)?;
        for block in &self.decoder.blocks {
            let (q, k, v) = block.self_qkv(tape, h)?;
            let (ck, cv) = block.cross_kv(tape, memory)?;
            let kv = DecoderKv {
                self_k: k,
                self_v: v,
                self_segs: segs.clone(),
                cross_k: ck,
                cross_v: cv,
                cross_segs: mem_segs.clone(),
            };
            h = block.finish(tape, h, q, &segs, &kv, self.config.n_heads)?;
        }
        let h = self.decoder_norm.forward(tape, h)?;
        self.lm_head.forward(tape, h)
    }

    /// Encoder memory `[len, d_model]` of one source sequence.
    pub fn encode(&self, src: &[usize]) -> Result<Tensor<T>> {
        let mut tape = Tape::with_params(&self.params);
        let (m, _) = self.encode_batch(&mut tape, &[src])?;
        Ok(tape.value(m).clone())
    }

    /// Mean next-token loss of a batch without building gradients.
    pub fn loss(&self, srcs: &[&[usize]], tgt_in: &[&[usize]], targets: &[usize]) -> Result<f64> {
        let mut tape = Tape::with_params(&self.params);
        let logits = self.forward(&mut tape, srcs, tgt_in)?;
        let l = tape.cross_entropy(logits, targets)?;
        Ok(tape.value(l).data()[0].as_f64())
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }
}

impl<T: Scalar> Module for Seq2SeqModel<T> {
    fn children(&self) -> Vec<(String, Child<'_>)> {
        vec![
            ("embed".into(), Child::Other("embedding")),
            ("encoder".into(), Child::Module(&self.encoder)),
            ("decoder".into(), Child::Module(&self.decoder)),
            ("lm_head".into(), Child::Linear(&self.lm_head)),
        ]
    }

    fn children_mut(&mut self) -> Vec<(String, ChildMut<'_>)> {
        vec![
            ("embed".into(), ChildMut::Other("embedding")),
            ("encoder".into(), ChildMut::Module(&mut self.encoder)),
            ("decoder".into(), ChildMut::Module(&mut self.decoder)),
            ("lm_head".into(), ChildMut::Linear(&mut self.lm_head)),
        ]
    }
}

/// Decoder input and targets for one answer: `[start, a..]` and `[a.., eos]`.
pub fn teacher_forcing_pair(answer: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut input = Vec::with_capacity(answer.len() + 1);
    input.push(DECODER_START_ID);
    input.extend_from_slice(answer);
    let mut target = answer.to_vec();
    target.push(EOS_ID);
    (input, target)
}

#[cfg(test)]
mod tests;
