//! Best-of-K displacement errors and per-scene result tables.

use std::fmt::Write as _;

use crate::data::Point;
use crate::error::{Error, Result};
use crate::tokenizer::{parse_answer, DecodeFailure};

pub const DEFAULT_K: usize = 20;

/// `K` predicted trajectories against one ground truth, all of length `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    samples: Vec<Vec<Point>>,
    truth: Vec<Point>,
}

impl PredictionSet {
    pub fn new(samples: Vec<Vec<Point>>, truth: Vec<Point>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Invalid("prediction set needs at least one sample".into()));
        }
        if truth.is_empty() {
            return Err(Error::Invalid("empty ground truth".into()));
        }
        if let Some(s) = samples.iter().find(|s| s.len() != truth.len()) {
            return Err(Error::shape("prediction set", &[s.len()], &[truth.len()]));
        }
        Ok(Self { samples, truth })
    }

    pub fn k(&self) -> usize {
        self.samples.len()
    }

    pub fn horizon(&self) -> usize {
        self.truth.len()
    }

    pub fn samples(&self) -> &[Vec<Point>] {
        &self.samples
    }

    pub fn truth(&self) -> &[Point] {
        &self.truth
    }
}

fn dist(a: Point, b: Point) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

pub fn ade(pred: &[Point], truth: &[Point]) -> f64 {
    pred.iter().zip(truth).map(|(&p, &t)| dist(p, t)).sum::<f64>() / truth.len() as f64
}

pub fn fde(pred: &[Point], truth: &[Point]) -> f64 {
    dist(*pred.last().expect("non-empty"), *truth.last().expect("non-empty"))
}

pub fn min_ade(set: &PredictionSet) -> f64 {
    set.samples.iter().map(|s| ade(s, &set.truth)).fold(f64::INFINITY, f64::min)
}

pub fn min_fde(set: &PredictionSet) -> f64 {
    set.samples.iter().map(|s| fde(s, &set.truth)).fold(f64::INFINITY, f64::min)
}

/// A decoded sample, or the constant-position fallback used in its place.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSample {
    pub points: Vec<Point>,
    pub failure: Option<DecodeFailure>,
}

/// Parses generated answer text into exactly `horizon` points. Failed or
/// short decodes are replaced by `horizon` copies of `last_observed`.
pub fn score_answer(text: &str, last_observed: Point, horizon: usize) -> ScoredSample {
    let failure = match parse_answer(text, horizon) {
        Ok(p) if p.len() == horizon => {
            return ScoredSample {
                points: p,
                failure: None,
            }
        }
        Ok(p) => DecodeFailure::TooShort {
            got: p.len(),
            want: horizon,
        },
        Err(f) => f,
    };
    ScoredSample {
        points: vec![last_observed; horizon],
        failure: Some(failure),
    }
}

/// Running totals over the windows of one scene.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SceneAccumulator {
    ade_sum: f64,
    fde_sum: f64,
    windows: usize,
    samples: usize,
    failures: usize,
}

impl SceneAccumulator {
    pub fn add(&mut self, set: &PredictionSet, failures: usize) {
        self.ade_sum += min_ade(set);
        self.fde_sum += min_fde(set);
        self.windows += 1;
        self.samples += set.k();
        self.failures += failures;
    }

    pub fn finish(&self, scene: &str, variant: &str) -> SceneResult {
        let n = self.windows.max(1) as f64;
        SceneResult {
            scene: scene.to_string(),
            variant: variant.to_string(),
            ade: self.ade_sum / n,
            fde: self.fde_sum / n,
            failure_rate: if self.samples == 0 {
                0.0
            } else {
                self.failures as f64 / self.samples as f64
            },
            samples: self.samples,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneResult {
    pub scene: String,
    pub variant: String,
    pub ade: f64,
    pub fde: f64,
    pub failure_rate: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub result: SceneResult,
    /// `(ADE, FDE)` of this row minus the baseline's.
    pub delta: Option<(f64, f64)>,
}

pub const AVG_SCENE: &str = "AVG";

/// Per-scene rows followed by an unweighted `AVG` row; with a baseline,
/// each row carries `method - baseline` for the scene of the same name.
pub fn aggregate(results: &[SceneResult], baseline: Option<&[SceneResult]>) -> Result<Vec<ReportRow>> {
    if results.is_empty() {
        return Err(Error::Invalid("no scene results to aggregate".into()));
    }
    let variant = results[0].variant.clone();
    let n = results.len() as f64;
    let avg = SceneResult {
        scene: AVG_SCENE.into(),
        variant,
        ade: results.iter().map(|r| r.ade).sum::<f64>() / n,
        fde: results.iter().map(|r| r.fde).sum::<f64>() / n,
        failure_rate: results.iter().map(|r| r.failure_rate).sum::<f64>() / n,
        samples: results.iter().map(|r| r.samples).sum(),
    };
    let base_rows = match baseline {
        Some(b) => Some(aggregate(b, None)?),
        None => None,
    };
    results
        .iter()
        .cloned()
        .chain(std::iter::once(avg))
        .map(|r| {
            let delta = match &base_rows {
                None => None,
                Some(b) => {
                    let base = b
                        .iter()
                        .find(|x| x.result.scene == r.scene)
                        .ok_or_else(|| Error::UnknownScene(r.scene.clone()))?;
                    Some((r.ade - base.result.ade, r.fde - base.result.fde))
                }
            };
            Ok(ReportRow { result: r, delta })
        })
        .collect()
}

/// CSV with columns `scene,variant,ADE,FDE,failure_rate,samples`, plus
/// `dADE,dFDE` when any row has a delta.
pub fn to_csv(rows: &[ReportRow]) -> String {
    let with_delta = rows.iter().any(|r| r.delta.is_some());
    let mut s = String::from("scene,variant,ADE,FDE,failure_rate,samples");
    if with_delta {
        s.push_str(",dADE,dFDE");
    }
    s.push('\n');
    for row in rows {
        let r = &row.result;
        let _ = write!(s, "{},{},{:.4},{:.4},{:.4},{}", r.scene, r.variant, r.ade, r.fde, r.failure_rate, r.samples);
        if with_delta {
            match row.delta {
                Some((a, f)) => {
                    let _ = write!(s, ",{a:+.4},{f:+.4}");
                }
                None => s.push_str(",,"),
            }
        }
        s.push('\n');
    }
    s
}
