//! Plain-text `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! errors. Lists are comma-separated.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ternatraj::autodiff::SteMode;
use ternatraj::bitlinear::{BiasPolicy, BitLinearConfig, QuantMode};
use ternatraj::data::WindowConfig;
use ternatraj::deploy::TritEncoding;
use ternatraj::model::{ModelConfig, SamplingConfig};
use ternatraj::train::TrainConfig;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Directory of scene files; empty selects the synthetic suite.
    pub data_dir: String,
    pub synth_agents: usize,
    pub synth_noise: f64,
    pub synth_seed: u64,
    /// Held-out scene; empty trains on every scene.
    pub held_out: String,
    pub window: WindowConfig,
    pub precision: usize,
    pub vocab_size: usize,
    pub model: ModelConfig,
    pub mode: QuantMode,
    pub bit: BitLinearConfig,
    pub train: TrainConfig,
    pub smoothing: usize,
    pub sampling: SamplingConfig,
    pub eval_k: usize,
    /// Caps the number of evaluated windows per scene; 0 evaluates all.
    pub eval_max_windows: usize,
    pub sweep_lrs: Vec<f64>,
    pub sweep_modes: Vec<QuantMode>,
    pub sweep_seeds: Vec<u64>,
    pub bench_repeats: usize,
    pub bench_warmup: usize,
    pub encoding: TritEncoding,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_dir: String::new(),
            synth_agents: 10,
            synth_noise: 0.3,
            synth_seed: 0,
            held_out: String::new(),
            window: WindowConfig {
                stride: 2,
                ..WindowConfig::default()
            },
            precision: 2,
            vocab_size: 200,
            model: ModelConfig::tiny(200),
            mode: QuantMode::Weight,
            bit: BitLinearConfig::default(),
            train: TrainConfig::default(),
            smoothing: 50,
            sampling: SamplingConfig {
                temperature: 0.7,
                max_new_tokens: 128,
                seed: 0,
            },
            eval_k: 20,
            eval_max_windows: 0,
            sweep_lrs: vec![1e-4, 2e-4, 4e-4],
            sweep_modes: vec![QuantMode::None, QuantMode::Weight, QuantMode::Activ],
            sweep_seeds: vec![0, 1, 2, 3, 4],
            bench_repeats: 10,
            bench_warmup: 1,
            encoding: TritEncoding::TwoBit,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> CliResult<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| CliError::BadValue {
        key: key.to_string(),
        msg: format!("`{value}`: {e}"),
    })
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> CliResult<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    let items: Vec<T> = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect::<CliResult<_>>()?;
    if items.is_empty() {
        return Err(CliError::BadValue {
            key: key.to_string(),
            msg: "empty list".into(),
        });
    }
    Ok(items)
}

fn ste_name(s: SteMode) -> &'static str {
    match s {
        SteMode::Clipped => "clipped",
        SteMode::Identity => "identity",
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let t = &self.train;
        vec![
            ("data.dir", self.data_dir.clone()),
            ("data.synth_agents", self.synth_agents.to_string()),
            ("data.synth_noise", self.synth_noise.to_string()),
            ("data.synth_seed", self.synth_seed.to_string()),
            ("data.held_out", self.held_out.clone()),
            ("data.obs_len", self.window.obs_len.to_string()),
            ("data.fut_len", self.window.fut_len.to_string()),
            ("data.stride", self.window.stride.to_string()),
            ("data.max_neighbors", self.window.max_neighbors.to_string()),
            ("data.precision", self.precision.to_string()),
            ("tokenizer.vocab_size", self.vocab_size.to_string()),
            ("model.n_encoder_blocks", m.n_encoder_blocks.to_string()),
            ("model.n_decoder_blocks", m.n_decoder_blocks.to_string()),
            ("model.d_model", m.d_model.to_string()),
            ("model.d_ff", m.d_ff.to_string()),
            ("model.n_heads", m.n_heads.to_string()),
            ("model.max_seq_len", m.max_seq_len.to_string()),
            ("model.tie_lm_head", m.tie_lm_head.to_string()),
            ("model.linear_bias", m.linear_bias.to_string()),
            ("quant.mode", self.mode.name().to_string()),
            ("quant.eps", self.bit.eps.to_string()),
            ("quant.bias_policy", self.bit.bias_policy.name().to_string()),
            ("quant.ste", ste_name(self.bit.ste).to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.grad_clip_norm", t.grad_clip_norm.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.beta1", t.beta1.to_string()),
            ("train.beta2", t.beta2.to_string()),
            ("train.adam_eps", t.adam_eps.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.max_steps", t.max_steps.map_or(String::new(), |s| s.to_string())),
            ("train.smoothing", self.smoothing.to_string()),
            ("sample.temperature", self.sampling.temperature.to_string()),
            ("sample.max_new_tokens", self.sampling.max_new_tokens.to_string()),
            ("sample.seed", self.sampling.seed.to_string()),
            ("eval.k", self.eval_k.to_string()),
            ("eval.max_windows", self.eval_max_windows.to_string()),
            ("sweep.lrs", join(&self.sweep_lrs)),
            ("sweep.modes", join(&self.sweep_modes)),
            ("sweep.seeds", join(&self.sweep_seeds)),
            ("bench.repeats", self.bench_repeats.to_string()),
            ("bench.warmup", self.bench_warmup.to_string()),
            ("export.encoding", self.encoding.name().to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        let v = value.trim();
        match key {
            "data.dir" => self.data_dir = v.to_string(),
            "data.synth_agents" => self.synth_agents = parse(key, v)?,
            "data.synth_noise" => self.synth_noise = parse(key, v)?,
            "data.synth_seed" => self.synth_seed = parse(key, v)?,
            "data.held_out" => self.held_out = v.to_string(),
            "data.obs_len" => self.window.obs_len = parse(key, v)?,
            "data.fut_len" => self.window.fut_len = parse(key, v)?,
            "data.stride" => self.window.stride = parse(key, v)?,
            "data.max_neighbors" => self.window.max_neighbors = parse(key, v)?,
            "data.precision" => self.precision = parse(key, v)?,
            "tokenizer.vocab_size" => self.vocab_size = parse(key, v)?,
            "model.n_encoder_blocks" => self.model.n_encoder_blocks = parse(key, v)?,
            "model.n_decoder_blocks" => self.model.n_decoder_blocks = parse(key, v)?,
            "model.d_model" => self.model.d_model = parse(key, v)?,
            "model.d_ff" => self.model.d_ff = parse(key, v)?,
            "model.n_heads" => self.model.n_heads = parse(key, v)?,
            "model.max_seq_len" => self.model.max_seq_len = parse(key, v)?,
            "model.tie_lm_head" => self.model.tie_lm_head = parse(key, v)?,
            "model.linear_bias" => self.model.linear_bias = parse(key, v)?,
            "quant.mode" => self.mode = parse(key, v)?,
            "quant.eps" => self.bit.eps = parse(key, v)?,
            "quant.bias_policy" => self.bit.bias_policy = parse::<BiasPolicy>(key, v)?,
            "quant.ste" => {
                self.bit.ste = match v {
                    "clipped" => SteMode::Clipped,
                    "identity" => SteMode::Identity,
                    _ => {
                        return Err(CliError::BadValue {
                            key: key.into(),
                            msg: format!("`{v}` (clipped, identity)"),
                        })
                    }
                }
            }
            "train.lr" => self.train.lr = parse(key, v)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.grad_clip_norm" => self.train.grad_clip_norm = parse(key, v)?,
            "train.seed" => self.train.seed = parse(key, v)?,
            "train.beta1" => self.train.beta1 = parse(key, v)?,
            "train.beta2" => self.train.beta2 = parse(key, v)?,
            "train.adam_eps" => self.train.adam_eps = parse(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse(key, v)?,
            "train.max_steps" => self.train.max_steps = if v.is_empty() { None } else { Some(parse(key, v)?) },
            "train.smoothing" => self.smoothing = parse(key, v)?,
            "sample.temperature" => self.sampling.temperature = parse(key, v)?,
            "sample.max_new_tokens" => self.sampling.max_new_tokens = parse(key, v)?,
            "sample.seed" => self.sampling.seed = parse(key, v)?,
            "eval.k" => self.eval_k = parse(key, v)?,
            "eval.max_windows" => self.eval_max_windows = parse(key, v)?,
            "sweep.lrs" => self.sweep_lrs = parse_list(key, v)?,
            "sweep.modes" => self.sweep_modes = parse_list(key, v)?,
            "sweep.seeds" => self.sweep_seeds = parse_list(key, v)?,
            "bench.repeats" => self.bench_repeats = parse(key, v)?,
            "bench.warmup" => self.bench_warmup = parse(key, v)?,
            "export.encoding" => self.encoding = parse(key, v)?,
            _ => return Err(CliError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Applies a file's assignments on top of `self`.
    pub fn apply_text(&mut self, text: &str, source: &str) -> CliResult<()> {
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| CliError::Config {
                source_name: source.to_string(),
                line: i + 1,
                msg,
            };
            let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected `key = value`, found `{line}`")))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(err(format!("duplicate key `{k}`")));
            }
            self.set(k, v).map_err(|e| match e {
                CliError::UnknownKey(_) | CliError::BadValue { .. } => err(e.to_string()),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut c = Self::default();
        c.apply_text(&text, &path.display().to_string())?;
        Ok(c)
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> CliResult<()> {
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| CliError::BadValue {
                key: o.clone(),
                msg: "expected key=value".into(),
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Checks cross-field constraints.
    pub fn validate(&self) -> CliResult<()> {
        self.train.validate()?;
        self.model_config(self.vocab_size).validate()?;
        if self.eval_k == 0 {
            return Err(CliError::BadValue {
                key: "eval.k".into(),
                msg: "must be >= 1".into(),
            });
        }
        if self.bench_repeats == 0 {
            return Err(CliError::BadValue {
                key: "bench.repeats".into(),
                msg: "must be >= 1".into(),
            });
        }
        Ok(())
    }

    /// Model shape for a vocabulary of `vocab_len` tokens.
    pub fn model_config(&self, vocab_len: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab_len,
            ..self.model
        }
    }

    pub fn data_dir(&self) -> Option<PathBuf> {
        (!self.data_dir.is_empty()).then(|| PathBuf::from(&self.data_dir))
    }

    /// The fully resolved configuration as a loadable file.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# resolved configuration\n");
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}
