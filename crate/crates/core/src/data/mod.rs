//! Scene files, windowing, homographies, splits and synthetic scenes.
//!
//! Scene file format: UTF-8 text, one observation per line, whitespace
//! separated `frame_id ped_id x y`. Blank lines and lines starting with `#`
//! are skipped. Ids may be written as integral floats (`10.0`).
//!
//! Homography file format: three lines of three whitespace separated floats,
//! row-major.

mod synth;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

pub use synth::{synth_scene, synth_tracks, synthetic_suite, Motion, SynthKind, SynthTrack, SYNTH_FRAME_GAP};

use crate::error::{Error, Result};

pub type Point = (f64, f64);

pub const OBS_LEN: usize = 8;
pub const FUT_LEN: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub frame: i64,
    pub ped: i64,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneTable {
    pub name: String,
    /// Sorted by `(frame, ped)`.
    pub rows: Vec<Observation>,
    pub homography: Option<Homography>,
}

impl SceneTable {
    /// Sorts and validates; duplicate `(frame, ped)` pairs are rejected.
    pub fn new(name: impl Into<String>, mut rows: Vec<Observation>) -> Result<Self> {
        let name = name.into();
        rows.sort_by_key(|r| (r.frame, r.ped));
        if let Some(w) = rows.windows(2).find(|w| (w[0].frame, w[0].ped) == (w[1].frame, w[1].ped)) {
            return Err(Error::Invalid(format!(
                "{name}: duplicate observation for frame {} ped {}",
                w[0].frame, w[0].ped
            )));
        }
        Ok(Self {
            name,
            rows,
            homography: None,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Observations per pedestrian, frames ascending.
    pub fn tracks(&self) -> BTreeMap<i64, Vec<Observation>> {
        let mut out: BTreeMap<i64, Vec<Observation>> = BTreeMap::new();
        for r in &self.rows {
            out.entry(r.ped).or_default().push(*r);
        }
        out
    }

    /// Most common gap between consecutive frames of the same pedestrian;
    /// ties go to the smaller gap.
    pub fn frame_stride(&self) -> Option<i64> {
        let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
        for track in self.tracks().values() {
            for w in track.windows(2) {
                *counts.entry(w[1].frame - w[0].frame).or_default() += 1;
            }
        }
        let best = counts.values().copied().max()?;
        counts.into_iter().find(|&(_, c)| c == best).map(|(g, _)| g)
    }
}

fn parse_id(tok: &str) -> Option<i64> {
    if let Ok(v) = tok.parse::<i64>() {
        return Some(v);
    }
    let f = tok.parse::<f64>().ok()?;
    (f.is_finite() && f.fract() == 0.0 && f.abs() < 9e15).then_some(f as i64)
}

/// Parses scene text; `source` names the input in error messages.
pub fn parse_scene(text: &str, name: &str, source: &str) -> Result<SceneTable> {
    let err = |line: usize, msg: String| Error::Parse {
        source_name: source.to_string(),
        line,
        msg,
    };
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let ln = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 4 {
            return Err(err(ln, format!("expected 4 columns, found {}", cols.len())));
        }
        let frame = parse_id(cols[0]).ok_or_else(|| err(ln, format!("bad frame id `{}`", cols[0])))?;
        let ped = parse_id(cols[1]).ok_or_else(|| err(ln, format!("bad pedestrian id `{}`", cols[1])))?;
        let coord = |s: &str| s.parse::<f64>().ok().filter(|v| v.is_finite());
        let x = coord(cols[2]).ok_or_else(|| err(ln, format!("bad x `{}`", cols[2])))?;
        let y = coord(cols[3]).ok_or_else(|| err(ln, format!("bad y `{}`", cols[3])))?;
        if !seen.insert((frame, ped)) {
            return Err(err(ln, format!("duplicate observation for frame {frame} ped {ped}")));
        }
        rows.push(Observation { frame, ped, x, y });
    }
    SceneTable::new(name, rows)
}

/// Loads a scene file; the scene is named after the file stem.
pub fn load_scene(path: impl AsRef<Path>) -> Result<SceneTable> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("scene");
    parse_scene(&text, name, &path.display().to_string())
}

pub fn write_scene(table: &SceneTable) -> String {
    let mut s = String::new();
    for r in &table.rows {
        s.push_str(&format!("{} {} {} {}\n", r.frame, r.ped, r.x, r.y));
    }
    s
}

/// Row-major 3x3 projective transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(pub [[f64; 3]; 3]);

impl Homography {
    pub const IDENTITY: Homography = Homography([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut m = [[0.0; 3]; 3];
        let lines: Vec<(usize, &str)> = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .collect();
        if lines.len() != 3 {
            return Err(Error::Parse {
                source_name: source.into(),
                line: lines.get(3).map_or(lines.len() + 1, |l| l.0 + 1),
                msg: format!("expected 3 rows, found {}", lines.len()),
            });
        }
        for (r, (i, line)) in lines.iter().enumerate() {
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    source_name: source.into(),
                    line: i + 1,
                    msg: e.to_string(),
                })?;
            if vals.len() != 3 {
                return Err(Error::Parse {
                    source_name: source.into(),
                    line: i + 1,
                    msg: format!("expected 3 values, found {}", vals.len()),
                });
            }
            m[r].copy_from_slice(&vals);
        }
        Ok(Homography(m))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn apply(&self, (x, y): Point) -> Result<Point> {
        let h = &self.0;
        let xp = h[0][0] * x + h[0][1] * y + h[0][2];
        let yp = h[1][0] * x + h[1][1] * y + h[1][2];
        let w = h[2][0] * x + h[2][1] * y + h[2][2];
        if w.abs() < 1e-12 || !w.is_finite() {
            return Err(Error::Projection { x, y });
        }
        Ok((xp / w, yp / w))
    }
}

/// `(x', y', w') = H·(x, y, 1)`, returned as `(x'/w', y'/w')`.
pub fn project_homography(points: &[Point], h: &Homography) -> Result<Vec<Point>> {
    points.iter().map(|&p| h.apply(p)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub ped: i64,
    pub obs: Vec<Point>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryWindow {
    pub scene: String,
    pub ped: i64,
    pub start_frame: i64,
    pub obs: Vec<Point>,
    pub fut: Vec<Point>,
    /// Agents observed at every observed frame, nearest first at the last
    /// observed frame.
    pub neighbors: Vec<Neighbor>,
}

impl TrajectoryWindow {
    pub fn last_observed(&self) -> Point {
        *self.obs.last().expect("non-empty observation")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowConfig {
    pub obs_len: usize,
    pub fut_len: usize,
    /// Offset in frames-steps between consecutive window starts.
    pub stride: usize,
    pub max_neighbors: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            obs_len: OBS_LEN,
            fut_len: FUT_LEN,
            stride: 1,
            max_neighbors: 2,
        }
    }
}

/// Sliding windows over each pedestrian's contiguous runs, i.e. maximal
/// stretches whose frame gaps all equal the scene's frame stride.
pub fn make_windows(table: &SceneTable, cfg: &WindowConfig) -> Result<Vec<TrajectoryWindow>> {
    if cfg.obs_len == 0 || cfg.fut_len == 0 || cfg.stride == 0 {
        return Err(Error::Invalid(format!("window lengths and stride must be >= 1: {cfg:?}")));
    }
    let Some(gap) = table.frame_stride() else {
        return Ok(Vec::new());
    };
    let by_frame: HashMap<(i64, i64), Point> = table.rows.iter().map(|r| ((r.frame, r.ped), (r.x, r.y))).collect();
    let peds: Vec<i64> = table.tracks().keys().copied().collect();
    let total = cfg.obs_len + cfg.fut_len;

    let mut out = Vec::new();
    for (&ped, track) in &table.tracks() {
        let mut run_start = 0;
        for i in 1..=track.len() {
            let broken = i == track.len() || track[i].frame - track[i - 1].frame != gap;
            if !broken {
                continue;
            }
            let run = &track[run_start..i];
            run_start = i;
            if run.len() < total {
                continue;
            }
            for s in (0..=run.len() - total).step_by(cfg.stride) {
                let w = &run[s..s + total];
                let obs: Vec<Point> = w[..cfg.obs_len].iter().map(|o| (o.x, o.y)).collect();
                let fut: Vec<Point> = w[cfg.obs_len..].iter().map(|o| (o.x, o.y)).collect();
                let frames: Vec<i64> = w[..cfg.obs_len].iter().map(|o| o.frame).collect();
                let last = *obs.last().unwrap();
                let mut neighbors: Vec<(f64, Neighbor)> = peds
                    .iter()
                    .filter(|&&p| p != ped)
                    .filter_map(|&p| {
                        let nobs: Option<Vec<Point>> = frames.iter().map(|&f| by_frame.get(&(f, p)).copied()).collect();
                        let nobs = nobs?;
                        let (lx, ly) = *nobs.last().unwrap();
                        let d = (lx - last.0).hypot(ly - last.1);
                        Some((d, Neighbor { ped: p, obs: nobs }))
                    })
                    .collect();
                neighbors.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.ped.cmp(&b.1.ped)));
                neighbors.truncate(cfg.max_neighbors);
                out.push(TrajectoryWindow {
                    scene: table.name.clone(),
                    ped,
                    start_frame: w[0].frame,
                    obs,
                    fut,
                    neighbors: neighbors.into_iter().map(|(_, n)| n).collect(),
                });
            }
        }
    }
    Ok(out)
}

/// Training scenes and the held-out test scene. `train` may be empty when
/// only one scene is given; callers decide whether that is acceptable.
#[derive(Debug, Clone)]
pub struct Split<'a> {
    pub train: Vec<&'a SceneTable>,
    pub test: &'a SceneTable,
}

pub fn leave_one_out_split<'a>(scenes: &'a [SceneTable], held_out: &str) -> Result<Split<'a>> {
    let test = scenes
        .iter()
        .find(|s| s.name == held_out)
        .ok_or_else(|| Error::UnknownScene(held_out.to_string()))?;
    let train = scenes.iter().filter(|s| s.name != held_out).collect();
    Ok(Split { train, test })
}

#[cfg(test)]
mod tests;
