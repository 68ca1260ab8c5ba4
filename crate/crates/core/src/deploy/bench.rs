use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::model::DeployModel;
use crate::error::{Error, Result};
use crate::model::SamplingConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub repeats: usize,
    pub warmup: usize,
    pub sampling: SamplingConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            repeats: 10,
            warmup: 1,
            sampling: SamplingConfig {
                temperature: 0.7,
                max_new_tokens: 64,
                seed: 0,
            },
        }
    }
}

/// Latency of generating one sequence at batch size 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub seq_per_s: f64,
    pub bytes_total: usize,
    pub repeats: usize,
    pub total_ms: f64,
    pub mean_tokens: f64,
}

/// Summary of raw per-sequence times; `seq_per_s` is `repeats / total`.
pub fn summarize(times_ms: &[f64], tokens: &[usize], bytes_total: usize) -> Result<BenchReport> {
    if times_ms.is_empty() {
        return Err(Error::Invalid("bench needs at least one repeat".into()));
    }
    let n = times_ms.len();
    let total: f64 = times_ms.iter().sum();
    let mut sorted = times_ms.to_vec();
    sorted.sort_by(f64::total_cmp);
    let p50 = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };
    // Nearest rank.
    let p95 = sorted[((0.95 * n as f64).ceil() as usize).clamp(1, n) - 1];
    Ok(BenchReport {
        mean_ms: total / n as f64,
        p50_ms: p50,
        p95_ms: p95,
        seq_per_s: if total > 0.0 { n as f64 / (total / 1000.0) } else { f64::INFINITY },
        bytes_total,
        repeats: n,
        total_ms: total,
        mean_tokens: tokens.iter().sum::<usize>() as f64 / tokens.len().max(1) as f64,
    })
}

/// Times `repeats` sampled generations for `src` after `warmup` untimed
/// ones. Each repeat uses seed `sampling.seed + i`.
pub fn bench(model: &DeployModel, src: &[usize], cfg: &BenchConfig, bytes_total: usize) -> Result<BenchReport> {
    for i in 0..cfg.warmup {
        let s = SamplingConfig {
            seed: cfg.sampling.seed.wrapping_add(i as u64),
            ..cfg.sampling
        };
        model.sample(src, &s)?;
    }
    let mut times = Vec::with_capacity(cfg.repeats);
    let mut tokens = Vec::with_capacity(cfg.repeats);
    for i in 0..cfg.repeats {
        let s = SamplingConfig {
            seed: cfg.sampling.seed.wrapping_add(i as u64),
            ..cfg.sampling
        };
        let t = Instant::now();
        let out = model.sample(src, &s)?;
        times.push(t.elapsed().as_secs_f64() * 1000.0);
        tokens.push(out.len());
    }
    summarize(&times, &tokens, bytes_total)
}
