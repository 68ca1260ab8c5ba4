//! Text form of trajectories.
//!
//! ```text
//! prompt  := agent ("|" agent)* "|?"
//! agent   := "p" index ":" points
//! answer  := points
//! points  := (pair (";" pair)*)?
//! pair    := number "," number
//! ```
//!
//! Agent `p0` is the target; the others are its neighbors, nearest first.
//! Numbers use a fixed number of decimals and never print as `-0`.
//! Example at precision 1: `p0:1.0,2.0;1.5,2.5|p1:4.0,0.0;4.0,0.5|?` with
//! answer `2.0,3.0;2.5,3.5`.

use std::fmt;

use crate::data::{Point, TrajectoryWindow};

/// Serialized prompt and answer of one window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrajText {
    pub prompt: String,
    pub answer: String,
}

pub fn format_number(v: f64, precision: usize) -> String {
    let s = format!("{v:.precision$}");
    let negative_zero = s.starts_with('-') && s[1..].chars().all(|c| c == '0' || c == '.');
    if negative_zero {
        s[1..].to_string()
    } else {
        s
    }
}

pub fn format_points(points: &[Point], precision: usize) -> String {
    points
        .iter()
        .map(|&(x, y)| format!("{},{}", format_number(x, precision), format_number(y, precision)))
        .collect::<Vec<_>>()
        .join(";")
}

/// Prompt for a target track followed by neighbor tracks.
pub fn format_prompt(agents: &[&[Point]], precision: usize) -> String {
    let mut s = String::new();
    for (i, a) in agents.iter().enumerate() {
        s.push_str(&format!("p{i}:{}|", format_points(a, precision)));
    }
    s.push('?');
    s
}

pub fn serialize_window(w: &TrajectoryWindow, precision: usize) -> TrajText {
    let mut agents: Vec<&[Point]> = vec![&w.obs];
    agents.extend(w.neighbors.iter().map(|n| n.obs.as_slice()));
    TrajText {
        prompt: format_prompt(&agents, precision),
        answer: format_points(&w.fut, precision),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DecodeFailure {
    /// Pair `index` lacks its second coordinate.
    TruncatedPair { index: usize },
    /// A coordinate field is not a finite decimal number.
    NonNumeric { index: usize, field: String },
    /// More pairs (or a longer field) than allowed.
    LengthOverflow { limit: usize },
    /// Fewer pairs than the horizon requires.
    TooShort { got: usize, want: usize },
}

impl fmt::Display for DecodeFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecodeFailure::TruncatedPair { index } => write!(f, "truncated pair at position {index}"),
            DecodeFailure::NonNumeric { index, field } => {
                write!(f, "non-numeric field {field:?} at position {index}")
            }
            DecodeFailure::LengthOverflow { limit } => write!(f, "output exceeds {limit} points"),
            DecodeFailure::TooShort { got, want } => write!(f, "{got} points, expected {want}"),
        }
    }
}

impl std::error::Error for DecodeFailure {}

impl DecodeFailure {
    pub fn kind(&self) -> &'static str {
        match self {
            DecodeFailure::TruncatedPair { .. } => "truncated_pair",
            DecodeFailure::NonNumeric { .. } => "non_numeric",
            DecodeFailure::LengthOverflow { .. } => "length_overflow",
            DecodeFailure::TooShort { .. } => "too_short",
        }
    }
}

/// Longest accepted coordinate field.
const MAX_FIELD: usize = 24;

fn parse_field(s: &str, index: usize) -> Result<f64, DecodeFailure> {
    let ok_chars = !s.is_empty() && s.chars().all(|c| c.is_ascii_digit() || c == '-' || c == '.');
    let v = ok_chars.then(|| s.parse::<f64>().ok()).flatten().filter(|v| v.is_finite());
    v.ok_or_else(|| DecodeFailure::NonNumeric {
        index,
        field: s.to_string(),
    })
}

/// Parses generated answer text. A trailing `;` is tolerated. At most
/// `max_points` pairs are accepted, so runaway generations are reported
/// instead of parsed.
pub fn parse_answer(text: &str, max_points: usize) -> Result<Vec<Point>, DecodeFailure> {
    let text = text.strip_suffix(';').unwrap_or(text);
    if text.is_empty() {
        return Ok(Vec::new());
    }
    let overflow = DecodeFailure::LengthOverflow { limit: max_points };
    if text.len() > max_points.saturating_mul(2 * MAX_FIELD + 2) {
        return Err(overflow);
    }
    let mut out = Vec::new();
    for (index, pair) in text.split(';').enumerate() {
        if index >= max_points {
            return Err(overflow);
        }
        let mut fields = pair.split(',');
        let x = fields.next().unwrap_or("");
        let Some(y) = fields.next() else {
            parse_field(x, index)?;
            return Err(DecodeFailure::TruncatedPair { index });
        };
        if let Some(extra) = fields.next() {
            return Err(DecodeFailure::NonNumeric {
                index,
                field: extra.to_string(),
            });
        }
        if x.len() > MAX_FIELD || y.len() > MAX_FIELD {
            return Err(overflow);
        }
        if y.is_empty() {
            return Err(DecodeFailure::TruncatedPair { index });
        }
        out.push((parse_field(x, index)?, parse_field(y, index)?));
    }
    Ok(out)
}
