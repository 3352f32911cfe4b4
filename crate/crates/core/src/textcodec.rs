//! Character vocabulary, Levenshtein alignment and character error rate.
//!
//! Tokens: index 0 is the CTC blank; a 7-bit character code `c` maps to
//! index `c + 1`, giving 129 symbols.

use serde::{Deserialize, Serialize};

pub const BLANK: u32 = 0;
pub const VOCAB_SIZE: usize = 129;

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("character {ch:?} at position {position} is outside the 7-bit range")]
    NonAscii { position: usize, ch: char },
    #[error("token {token} at position {position} is not a character token (expected 1..=128)")]
    BadToken { position: usize, token: u32 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharVocab {
    size: usize,
    blank: u32,
}

impl Default for CharVocab {
    fn default() -> Self {
        CharVocab {
            size: VOCAB_SIZE,
            blank: BLANK,
        }
    }
}

impl CharVocab {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn blank(&self) -> u32 {
        self.blank
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>, CodecError> {
        text.chars()
            .enumerate()
            .map(|(position, ch)| {
                if (ch as u32) < 128 {
                    Ok(ch as u32 + 1)
                } else {
                    Err(CodecError::NonAscii { position, ch })
                }
            })
            .collect()
    }

    pub fn decode_tokens(&self, tokens: &[u32]) -> Result<String, CodecError> {
        tokens
            .iter()
            .enumerate()
            .map(|(position, &token)| {
                if (1..=128).contains(&token) {
                    Ok(char::from((token - 1) as u8))
                } else {
                    Err(CodecError::BadToken { position, token })
                }
            })
            .collect()
    }

    /// True when every character of `text` is encodable.
    pub fn accepts(&self, text: &str) -> bool {
        text.chars().all(|c| (c as u32) < 128)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EditOp {
    Match(char),
    Substitute { reference: char, hypothesis: char },
    Insert(char),
    Delete(char),
}

impl EditOp {
    pub fn is_error(&self) -> bool {
        !matches!(self, EditOp::Match(_))
    }
}

/// Ordered alignment turning the reference into the hypothesis.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EditScript {
    pub ops: Vec<EditOp>,
}

impl EditScript {
    /// Number of non-match operations.
    pub fn cost(&self) -> usize {
        self.ops.iter().filter(|op| op.is_error()).count()
    }

    /// Replays the script on `reference`; `None` when the script does not
    /// describe that reference.
    pub fn apply(&self, reference: &str) -> Option<String> {
        let mut src = reference.chars();
        let mut out = String::new();
        for op in &self.ops {
            match *op {
                EditOp::Match(c) => {
                    if src.next()? != c {
                        return None;
                    }
                    out.push(c);
                }
                EditOp::Substitute {
                    reference: r,
                    hypothesis: h,
                } => {
                    if src.next()? != r {
                        return None;
                    }
                    out.push(h);
                }
                EditOp::Insert(c) => out.push(c),
                EditOp::Delete(c) => {
                    if src.next()? != c {
                        return None;
                    }
                }
            }
        }
        src.next().is_none().then_some(out)
    }
}

/// Unit-cost edit distance with a witnessing script. When several moves are
/// optimal the backtrace prefers the diagonal (match/substitution), then
/// deletion, then insertion.
pub fn levenshtein(reference: &str, hypothesis: &str) -> (usize, EditScript) {
    let r: Vec<char> = reference.chars().collect();
    let h: Vec<char> = hypothesis.chars().collect();
    let (n, m) = (r.len(), h.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        d[i * w] = i;
        for j in 1..=m {
            let diag = d[(i - 1) * w + j - 1] + usize::from(r[i - 1] != h[j - 1]);
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = diag.min(del).min(ins);
        }
    }

    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let same = r[i - 1] == h[j - 1];
            if d[(i - 1) * w + j - 1] + usize::from(!same) == here {
                ops.push(if same {
                    EditOp::Match(r[i - 1])
                } else {
                    EditOp::Substitute {
                        reference: r[i - 1],
                        hypothesis: h[j - 1],
                    }
                });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[(i - 1) * w + j] + 1 == here {
            ops.push(EditOp::Delete(r[i - 1]));
            i -= 1;
        } else {
            ops.push(EditOp::Insert(h[j - 1]));
            j -= 1;
        }
    }
    ops.reverse();
    (d[n * w + m], EditScript { ops })
}

/// Character error rate of one utterance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cer {
    pub distance: usize,
    pub reference_len: usize,
    pub value: f64,
    /// Set when the reference is empty; `value` is then `distance / 1`.
    pub empty_reference: bool,
}

pub fn cer(reference: &str, hypothesis: &str) -> Cer {
    let (distance, _) = levenshtein(reference, hypothesis);
    let reference_len = reference.chars().count();
    Cer {
        distance,
        reference_len,
        value: distance as f64 / reference_len.max(1) as f64,
        empty_reference: reference_len == 0,
    }
}
