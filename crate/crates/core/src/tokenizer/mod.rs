//! Byte-pair encoding over trajectory text.
//!
//! Ids `0..3` are `pad`, `eos` and `unk`; then one id per alphabet character
//! in alphabet order; then one id per merge in merge order. Merges may span
//! any characters (there is no pre-tokenization).
//!
//! Vocab file format:
//!
//! ```text
//! ternatraj-bpe 1
//! alphabet 0123456789-.,;:|p?
//! specials pad=0 eos=1 unk=2
//! merges 2
//! 1 .
//! 1. 5
//! ```
//!
//! Each merge line holds the left and right token strings separated by a
//! single space.

mod text;

use std::collections::HashMap;
use std::path::Path;

pub use text::{format_number, format_points, format_prompt, parse_answer, serialize_window, DecodeFailure, TrajText};

use crate::error::{Error, Result};
use crate::model::{EOS_ID, PAD_ID};

pub const UNK_ID: usize = 2;
pub const N_SPECIAL: usize = 3;
/// Characters of serialized trajectories.
pub const TRAJ_ALPHABET: &str = "0123456789-.,;:|p?";
const HEADER: &str = "ternatraj-bpe 1";
const UNK_CHAR: char = '\u{FFFD}';

#[derive(Debug, Clone, PartialEq)]
pub struct BpeVocab {
    alphabet: Vec<char>,
    merges: Vec<(usize, usize)>,
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl BpeVocab {
    /// Character-level vocabulary without merges.
    pub fn base(alphabet: &str) -> Result<Self> {
        let mut chars: Vec<char> = Vec::new();
        for c in alphabet.chars() {
            if c.is_whitespace() || c == UNK_CHAR {
                return Err(Error::Invalid(format!("alphabet may not contain {c:?}")));
            }
            if chars.contains(&c) {
                return Err(Error::Invalid(format!("duplicate alphabet character {c:?}")));
            }
            chars.push(c);
        }
        if chars.is_empty() {
            return Err(Error::Invalid("empty alphabet".into()));
        }
        let mut tokens: Vec<String> = vec!["<pad>".into(), "<eos>".into(), "<unk>".into()];
        let mut index = HashMap::new();
        for c in &chars {
            index.insert(c.to_string(), tokens.len());
            tokens.push(c.to_string());
        }
        Ok(Self {
            alphabet: chars,
            merges: Vec::new(),
            tokens,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn base_size(&self) -> usize {
        N_SPECIAL + self.alphabet.len()
    }

    pub fn alphabet(&self) -> String {
        self.alphabet.iter().collect()
    }

    pub fn merges(&self) -> &[(usize, usize)] {
        &self.merges
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    fn push_merge(&mut self, a: usize, b: usize) -> usize {
        let s = format!("{}{}", self.tokens[a], self.tokens[b]);
        let id = self.tokens.len();
        self.index.insert(s.clone(), id);
        self.tokens.push(s);
        self.merges.push((a, b));
        id
    }

    fn chars_to_ids(&self, text: &str) -> Vec<usize> {
        text.chars()
            .map(|c| {
                let mut buf = [0u8; 4];
                self.id(c.encode_utf8(&mut buf)).unwrap_or(UNK_ID)
            })
            .collect()
    }

    /// Characters to ids, then every merge replayed in order.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut seq = self.chars_to_ids(text);
        let base = self.base_size();
        for (r, &(a, b)) in self.merges.iter().enumerate() {
            if seq.len() < 2 {
                break;
            }
            apply_merge(&mut seq, a, b, base + r);
        }
        seq
    }

    /// Concatenated token strings; `pad` and `eos` are skipped and unknown
    /// or out-of-range ids become U+FFFD.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut s = String::new();
        for &id in ids {
            match id {
                PAD_ID | EOS_ID => {}
                UNK_ID => s.push(UNK_CHAR),
                _ => match self.tokens.get(id) {
                    Some(t) => s.push_str(t),
                    None => s.push(UNK_CHAR),
                },
            }
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{HEADER}\nalphabet {}\nspecials pad={PAD_ID} eos={EOS_ID} unk={UNK_ID}\nmerges {}\n",
            self.alphabet(),
            self.merges.len()
        );
        for &(a, b) in &self.merges {
            s.push_str(&format!("{} {}\n", self.tokens[a], self.tokens[b]));
        }
        s
    }

    pub fn from_text(text: &str, source: &str) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            source_name: source.to_string(),
            line,
            msg,
        };
        let lines: Vec<&str> = text.lines().collect();
        let get = |i: usize| lines.get(i).copied().ok_or_else(|| err(i + 1, "unexpected end of file".into()));
        if get(0)? != HEADER {
            return Err(err(1, format!("expected header `{HEADER}`")));
        }
        let alphabet = get(1)?
            .strip_prefix("alphabet ")
            .ok_or_else(|| err(2, "expected `alphabet <chars>`".into()))?;
        let specials = format!("specials pad={PAD_ID} eos={EOS_ID} unk={UNK_ID}");
        if get(2)? != specials {
            return Err(err(3, format!("expected `{specials}`")));
        }
        let n: usize = get(3)?
            .strip_prefix("merges ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| err(4, "expected `merges <count>`".into()))?;
        let mut vocab = Self::base(alphabet).map_err(|e| err(2, e.to_string()))?;
        for i in 0..n {
            let ln = 5 + i;
            let line = get(ln - 1)?;
            let (a, b) = line
                .split_once(' ')
                .ok_or_else(|| err(ln, "expected `<left> <right>`".into()))?;
            let ia = vocab.id(a).ok_or_else(|| err(ln, format!("unknown token `{a}`")))?;
            let ib = vocab.id(b).ok_or_else(|| err(ln, format!("unknown token `{b}`")))?;
            if vocab.id(&format!("{a}{b}")).is_some() {
                return Err(err(ln, format!("merge `{a}{b}` duplicates an existing token")));
            }
            vocab.push_merge(ia, ib);
        }
        if lines[4 + n..].iter().any(|l| !l.trim().is_empty()) {
            return Err(err(5 + n, "trailing content after merges".into()));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, &path.display().to_string())
    }
}

/// Replaces non-overlapping `(a, b)` occurrences left to right.
fn apply_merge(seq: &mut Vec<usize>, a: usize, b: usize, new: usize) {
    let mut w = 0;
    let mut r = 0;
    while r < seq.len() {
        if r + 1 < seq.len() && seq[r] == a && seq[r + 1] == b {
            seq[w] = new;
            r += 2;
        } else {
            seq[w] = seq[r];
            r += 1;
        }
        w += 1;
    }
    seq.truncate(w);
}

/// Learned vocabulary plus the segmentation of the training corpus.
#[derive(Debug, Clone)]
pub struct BpeTraining {
    pub vocab: BpeVocab,
    pub segmented: Vec<Vec<usize>>,
}

/// Greedy BPE: repeatedly merges the most frequent adjacent pair until the
/// vocabulary reaches `vocab_size` or no pair occurs twice. Ties go to the
/// lexicographically smallest `(left, right)` token pair. Pairs involving
/// `unk` and pairs whose concatenation is already a token are skipped.
pub fn train_bpe_segmented(corpus: &[String], alphabet: &str, vocab_size: usize) -> Result<BpeTraining> {
    if corpus.is_empty() {
        return Err(Error::Invalid("cannot train a tokenizer on an empty corpus".into()));
    }
    let mut vocab = BpeVocab::base(alphabet)?;
    if vocab_size < vocab.base_size() {
        return Err(Error::Invalid(format!(
            "vocab_size {vocab_size} is below the base alphabet size {}",
            vocab.base_size()
        )));
    }
    let mut seqs: Vec<Vec<usize>> = corpus.iter().map(|t| vocab.chars_to_ids(t)).collect();
    while vocab.len() < vocab_size {
        let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
        for s in &seqs {
            for w in s.windows(2) {
                if w[0] != UNK_ID && w[1] != UNK_ID {
                    *counts.entry((w[0], w[1])).or_default() += 1;
                }
            }
        }
        let tok = |i: usize| vocab.tokens[i].as_str();
        let best = counts
            .iter()
            .filter(|(&(a, b), &c)| c >= 2 && vocab.id(&format!("{}{}", tok(a), tok(b))).is_none())
            .max_by(|(&p, &c), (&q, &d)| c.cmp(&d).then_with(|| (tok(q.0), tok(q.1)).cmp(&(tok(p.0), tok(p.1)))))
            .map(|(&p, _)| p);
        let Some((a, b)) = best else { break };
        let id = vocab.push_merge(a, b);
        for s in &mut seqs {
            apply_merge(s, a, b, id);
        }
    }
    Ok(BpeTraining {
        vocab,
        segmented: seqs,
    })
}

pub fn train_bpe(corpus: &[String], alphabet: &str, vocab_size: usize) -> Result<BpeVocab> {
    Ok(train_bpe_segmented(corpus, alphabet, vocab_size)?.vocab)
}
