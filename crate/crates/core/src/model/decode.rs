use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::DecoderKv;
use super::{Seq2SeqModel, DECODER_START_ID, EOS_ID};
use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Incremental decoding state: per-block key/value caches and the tokens
/// accepted so far.
#[derive(Debug, Clone)]
pub struct DecodeState<T> {
    self_k: Vec<Tensor<T>>,
    self_v: Vec<Tensor<T>>,
    cross: Vec<(Tensor<T>, Tensor<T>)>,
    pub tokens: Vec<usize>,
    step: usize,
}

impl<T: Scalar> DecodeState<T> {
    pub fn new(n_blocks: usize, d_model: usize) -> Self {
        Self {
            self_k: vec![Tensor::zeros(&[0, d_model]); n_blocks],
            self_v: vec![Tensor::zeros(&[0, d_model]); n_blocks],
            cross: Vec::new(),
            tokens: Vec::new(),
            step: 0,
        }
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// Cached positions of block `layer`.
    pub fn cache_len(&self, layer: usize) -> usize {
        self.self_k[layer].rows()
    }

    /// Records the token chosen from the last `decode_step`.
    pub fn accept(&mut self, token: usize) {
        self.tokens.push(token);
    }
}

fn append_row<T: Scalar>(cache: &mut Tensor<T>, row: &Tensor<T>) {
    let d = row.cols();
    let mut data = std::mem::replace(cache, Tensor::zeros(&[0, d])).into_data();
    data.extend_from_slice(row.data());
    let n = data.len() / d;
    *cache = Tensor::new(&[n, d], data).expect("cache rows");
}

/// Decoding hyperparameters; top-k filtering is not supported.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_new_tokens: 128,
            seed: 0,
        }
    }
}

/// Greedy argmax (first maximum) at `τ = 0`, otherwise a draw from
/// `softmax(logits / τ)`.
pub fn choose_token<T: Scalar, R: Rng + ?Sized>(logits: &[T], temperature: f64, rng: &mut R) -> usize {
    if temperature <= 0.0 {
        let mut best = 0;
        for (i, v) in logits.iter().enumerate() {
            if *v > logits[best] {
                best = i;
            }
        }
        return best;
    }
    let z: Vec<f64> = logits.iter().map(|v| v.as_f64() / temperature).collect();
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let w: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    WeightedIndex::new(&w).expect("at least one positive weight").sample(rng)
}

impl<T: Scalar> Seq2SeqModel<T> {
    pub fn new_decode_state(&self) -> DecodeState<T> {
        DecodeState::new(self.config.n_decoder_blocks, self.config.d_model)
    }

    /// Logits for the next position, feeding the last accepted token (or the
    /// start token) and extending every cache by one row.
    pub fn decode_step(&self, state: &mut DecodeState<T>, memory: &Tensor<T>) -> Result<Vec<T>> {
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

        let mut tape = Tape::with_params(&self.params);
        let mem = tape.constant(memory.clone());
        if state.cross.is_empty() {
            for block in &self.decoder.blocks {
                let (k, v) = block.cross_kv(&mut tape, mem)?;
                state.cross.push((tape.value(k).clone(), tape.value(v).clone()));
            }
        }
        let (mut h, segs) = self.embed(&mut tape, &[&[tok]], self.decoder_positions, pos)?;
        let mem_rows = memory.rows();
        for (l, block) in self.decoder.blocks.iter().enumerate() {
            let (q, k, v) = block.self_qkv(&mut tape, h)?;
            append_row(&mut state.self_k[l], tape.value(k));
            append_row(&mut state.self_v[l], tape.value(v));
            let kv = DecoderKv {
                self_k: tape.constant(state.self_k[l].clone()),
                self_v: tape.constant(state.self_v[l].clone()),
                self_segs: vec![(0, pos + 1)],
                cross_k: tape.constant(state.cross[l].0.clone()),
                cross_v: tape.constant(state.cross[l].1.clone()),
                cross_segs: vec![(0, mem_rows)],
            };
            h = block.finish(&mut tape, h, q, &segs, &kv, self.config.n_heads)?;
        }
        let h = self.decoder_norm.forward(&mut tape, h)?;
        let logits = self.lm_head.forward(&mut tape, h)?;
        state.step += 1;
        Ok(tape.value(logits).data().to_vec())
    }

    /// Autoregressive generation with the KV cache. Stops at EOS (not
    /// included in the output) or after `max_new_tokens`, capped by the
    /// positional table.
    pub fn sample(&self, src: &[usize], cfg: &SamplingConfig) -> Result<Vec<usize>> {
        if !(cfg.temperature >= 0.0) {
            return Err(Error::Invalid(format!("temperature must be >= 0, got {}", cfg.temperature)));
        }
        let memory = self.encode(src)?;
        let mut state = self.new_decode_state();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let budget = cfg.max_new_tokens.min(self.config.max_seq_len);
        while state.step() < budget {
            let logits = self.decode_step(&mut state, &memory)?;
            let tok = choose_token(&logits, cfg.temperature, &mut rng);
            if tok == EOS_ID {
                break;
            }
            state.accept(tok);
        }
        Ok(state.tokens)
    }

    /// Greedy generation that reruns the full decoder at every step.
    pub fn greedy_uncached(&self, src: &[usize], max_new_tokens: usize) -> Result<Vec<usize>> {
        let mut out: Vec<usize> = Vec::new();
        let budget = max_new_tokens.min(self.config.max_seq_len);
        while out.len() < budget {
            let mut input = vec![DECODER_START_ID];
            input.extend_from_slice(&out);
            let mut tape = Tape::with_params(&self.params);
            let logits = self.forward(&mut tape, &[src], &[&input])?;
            let t = tape.value(logits);
            let tok = choose_token(t.row(t.rows() - 1), 0.0, &mut rand::rngs::mock::StepRng::new(0, 0));
            if tok == EOS_ID {
                break;
            }
            out.push(tok);
        }
        Ok(out)
    }
}
