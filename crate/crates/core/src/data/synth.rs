use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Observation, Point, SceneTable};
use crate::error::{Error, Result};

/// Frame id increment between consecutive synthetic observations.
pub const SYNTH_FRAME_GAP: i64 = 10;
const MIN_LEN: usize = 20;
const MAX_EXTRA: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    Line,
    Turn,
    Crossing,
}

impl SynthKind {
    pub fn name(self) -> &'static str {
        match self {
            SynthKind::Line => "line",
            SynthKind::Turn => "turn",
            SynthKind::Crossing => "crossing",
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "line" => Ok(SynthKind::Line),
            "turn" => Ok(SynthKind::Turn),
            "crossing" => Ok(SynthKind::Crossing),
            other => Err(Error::Invalid(format!("unknown synthetic scene kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Motion {
    /// `p0 + t·v`
    Linear { p0: Point, v: Point },
    /// `c + r·(cos(φ0 + ωt), sin(φ0 + ωt))`
    Arc { c: Point, r: f64, phi0: f64, omega: f64 },
}

/// Noise-free generator of one synthetic agent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthTrack {
    pub ped: i64,
    pub start_frame: i64,
    pub len: usize,
    pub motion: Motion,
}

impl SynthTrack {
    pub fn position(&self, step: usize) -> Point {
        let t = step as f64;
        match self.motion {
            Motion::Linear { p0, v } => (p0.0 + t * v.0, p0.1 + t * v.1),
            Motion::Arc { c, r, phi0, omega } => {
                let a = phi0 + omega * t;
                (c.0 + r * a.cos(), c.1 + r * a.sin())
            }
        }
    }
}

/// Agent generators for a scene of `kind`; deterministic in `seed`.
pub fn synth_tracks(kind: SynthKind, n_agents: usize, seed: u64) -> Vec<SynthTrack> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_agents)
        .map(|i| {
            let start_frame = SYNTH_FRAME_GAP * rng.gen_range(0..6);
            let len = MIN_LEN + rng.gen_range(0..=MAX_EXTRA);
            let speed = rng.gen_range(2.0..5.0);
            let motion = match kind {
                SynthKind::Line => {
                    let th: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                    // Start so the track stays roughly centred on the canvas.
                    let half = speed * len as f64 / 2.0;
                    let mid = (rng.gen_range(40.0..60.0), rng.gen_range(40.0..60.0));
                    Motion::Linear {
                        p0: (mid.0 - half * th.cos(), mid.1 - half * th.sin()),
                        v: (speed * th.cos(), speed * th.sin()),
                    }
                }
                SynthKind::Turn => {
                    let r = rng.gen_range(15.0..35.0);
                    let dir = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    Motion::Arc {
                        c: (rng.gen_range(40.0..60.0), rng.gen_range(40.0..60.0)),
                        r,
                        phi0: rng.gen_range(0.0..std::f64::consts::TAU),
                        omega: dir * speed / r,
                    }
                }
                SynthKind::Crossing => {
                    let half = speed * len as f64 / 2.0;
                    let lane = rng.gen_range(-8.0..8.0);
                    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    if i % 2 == 0 {
                        Motion::Linear {
                            p0: (50.0 - sign * half, 50.0 + lane),
                            v: (sign * speed, 0.0),
                        }
                    } else {
                        Motion::Linear {
                            p0: (50.0 + lane, 50.0 - sign * half),
                            v: (0.0, sign * speed),
                        }
                    }
                }
            };
            SynthTrack {
                ped: i as i64,
                start_frame,
                len,
                motion,
            }
        })
        .collect()
}

/// Synthetic scene of `n_agents` tracks of 20 to 28 frames with i.i.d.
/// Gaussian position noise.
pub fn synth_scene(kind: SynthKind, n_agents: usize, noise_sigma: f64, seed: u64) -> Result<SceneTable> {
    if !(noise_sigma >= 0.0) {
        return Err(Error::Invalid(format!("noise sigma must be >= 0, got {noise_sigma}")));
    }
    let tracks = synth_tracks(kind, n_agents, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_0b5e);
    let noise = Normal::new(0.0, noise_sigma).expect("finite sigma");
    let mut rows = Vec::new();
    for t in &tracks {
        for s in 0..t.len {
            let (x, y) = t.position(s);
            let (dx, dy) = if noise_sigma > 0.0 {
                (noise.sample(&mut rng), noise.sample(&mut rng))
            } else {
                (0.0, 0.0)
            };
            rows.push(Observation {
                frame: t.start_frame + SYNTH_FRAME_GAP * s as i64,
                ped: t.ped,
                x: x + dx,
                y: y + dy,
            });
        }
    }
    SceneTable::new(kind.name(), rows)
}

/// Five named synthetic scenes for leave-one-out experiments.
pub fn synthetic_suite(n_agents: usize, noise_sigma: f64, seed: u64) -> Result<Vec<SceneTable>> {
    let spec = [
        ("line", SynthKind::Line),
        ("turn", SynthKind::Turn),
        ("crossing", SynthKind::Crossing),
        ("line-b", SynthKind::Line),
        ("turn-b", SynthKind::Turn),
    ];
    spec.iter()
        .enumerate()
        .map(|(i, (name, kind))| {
            let mut s = synth_scene(*kind, n_agents, noise_sigma, seed.wrapping_mul(31).wrapping_add(i as u64))?;
            s.name = name.to_string();
            Ok(s)
        })
        .collect()
}
