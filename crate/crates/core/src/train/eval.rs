use crate::data::{make_windows, project_homography, Homography, SceneTable, TrajectoryWindow, WindowConfig};
use crate::error::Result;
use crate::metrics::{score_answer, PredictionSet, SceneAccumulator, SceneResult, ScoredSample};
use crate::model::{SamplingConfig, Seq2SeqModel};
use crate::scalar::Scalar;
use crate::tokenizer::{serialize_window, BpeVocab};

/// Produces `k` future trajectories for a window.
pub trait Predictor {
    fn predict(&mut self, window: &TrajectoryWindow, k: usize) -> Result<Vec<ScoredSample>>;
}

/// Returns the ground-truth future `k` times.
#[derive(Debug, Clone, Copy, Default)]
pub struct OraclePredictor;

impl Predictor for OraclePredictor {
    fn predict(&mut self, window: &TrajectoryWindow, k: usize) -> Result<Vec<ScoredSample>> {
        Ok(vec![
            ScoredSample {
                points: window.fut.clone(),
                failure: None,
            };
            k
        ])
    }
}

/// Samples answer text from a model and parses it.
pub struct ModelPredictor<'a, T> {
    pub model: &'a Seq2SeqModel<T>,
    pub vocab: &'a BpeVocab,
    pub precision: usize,
    pub sampling: SamplingConfig,
    draws: u64,
}

impl<'a, T: Scalar> ModelPredictor<'a, T> {
    pub fn new(model: &'a Seq2SeqModel<T>, vocab: &'a BpeVocab, precision: usize, sampling: SamplingConfig) -> Self {
        Self {
            model,
            vocab,
            precision,
            sampling,
            draws: 0,
        }
    }
}

impl<T: Scalar> Predictor for ModelPredictor<'_, T> {
    fn predict(&mut self, window: &TrajectoryWindow, k: usize) -> Result<Vec<ScoredSample>> {
        let src = self.vocab.encode(&serialize_window(window, self.precision).prompt);
        let mut out = Vec::with_capacity(k);
        for _ in 0..k {
            let cfg = SamplingConfig {
                seed: self.sampling.seed.wrapping_add(self.draws.wrapping_mul(0x9E37_79B9_7F4A_7C15)),
                ..self.sampling
            };
            self.draws += 1;
            let ids = self.model.sample(&src, &cfg)?;
            let text = self.vocab.decode(&ids);
            out.push(score_answer(&text, window.last_observed(), window.fut.len()));
        }
        Ok(out)
    }
}

/// Best-of-`k` errors over `windows`, in world coordinates when a
/// homography is given.
pub fn evaluate_windows(
    predictor: &mut dyn Predictor,
    windows: &[TrajectoryWindow],
    k: usize,
    homography: Option<&Homography>,
) -> Result<SceneAccumulator> {
    let mut acc = SceneAccumulator::default();
    for w in windows {
        let samples = predictor.predict(w, k)?;
        let failures = samples.iter().filter(|s| s.failure.is_some()).count();
        let mut points: Vec<_> = samples.into_iter().map(|s| s.points).collect();
        let mut truth = w.fut.clone();
        if let Some(h) = homography {
            truth = project_homography(&truth, h)?;
            for p in &mut points {
                *p = project_homography(p, h)?;
            }
        }
        acc.add(&PredictionSet::new(points, truth)?, failures);
    }
    Ok(acc)
}

pub fn evaluate_scene(
    predictor: &mut dyn Predictor,
    scene: &SceneTable,
    window: &WindowConfig,
    k: usize,
    variant: &str,
) -> Result<SceneResult> {
    let windows = make_windows(scene, window)?;
    let acc = evaluate_windows(predictor, &windows, k, scene.homography.as_ref())?;
    Ok(acc.finish(&scene.name, variant))
}
