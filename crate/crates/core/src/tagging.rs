//! BIOES tag alphabet, span codecs and grammar-constrained Viterbi decoding.
//!
//! The accepted tag language is `(O | S | B I* E)*`. Decoding always returns a
//! path in that language; the span codecs only ever produce such paths.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Additive log-score applied to a forbidden transition (or a forbidden
/// first/last tag) during Viterbi decoding.
pub const FORBIDDEN_PENALTY: f64 = -1e9;

/// Number of BIOES symbols.
pub const NUM_TAGS: usize = 5;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TagError {
    #[error("spans ({0}, {1}) and ({2}, {3}) overlap or are out of order")]
    Overlap(usize, usize, usize, usize),
    #[error("span ({start}, {end}) is out of range for a sequence of length {len}")]
    OutOfRange { start: usize, end: usize, len: usize },
    #[error("unknown tag symbol {0:?}")]
    UnknownSymbol(String),
    #[error("cannot decode an empty emission table")]
    EmptyEmissions,
}

/// One BIOES symbol. The discriminant order `B < I < O < E < S` is also the
/// tie-break order used by the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Tag {
    B = 0,
    I = 1,
    O = 2,
    E = 3,
    S = 4,
}

impl Tag {
    pub const ALL: [Tag; NUM_TAGS] = [Tag::B, Tag::I, Tag::O, Tag::E, Tag::S];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Tag> {
        Tag::ALL.get(index).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Tag::B => "B",
            Tag::I => "I",
            Tag::O => "O",
            Tag::E => "E",
            Tag::S => "S",
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Tag {
    type Err = TagError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "B" => Ok(Tag::B),
            "I" => Ok(Tag::I),
            "O" => Ok(Tag::O),
            "E" => Ok(Tag::E),
            "S" => Ok(Tag::S),
            other => Err(TagError::UnknownSymbol(other.to_string())),
        }
    }
}

/// A token range `[start, end]` (both inclusive) with an optional entity class.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    #[serde(rename = "type", default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end, label: None }
    }

    pub fn typed(start: usize, end: usize, label: impl Into<String>) -> Self {
        Self { start, end, label: Some(label.into()) }
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// The same boundaries with the label dropped.
    pub fn untyped(&self) -> Span {
        Span::new(self.start, self.end)
    }
}

/// Encode sorted, non-overlapping spans over a sequence of `len` tokens.
pub fn encode_spans_to_bioes(len: usize, spans: &[Span]) -> Result<Vec<Tag>, TagError> {
    let mut tags = vec![Tag::O; len];
    let mut prev: Option<&Span> = None;
    for span in spans {
        if span.start > span.end || span.end >= len {
            return Err(TagError::OutOfRange { start: span.start, end: span.end, len });
        }
        if let Some(p) = prev {
            if span.start <= p.end {
                return Err(TagError::Overlap(p.start, p.end, span.start, span.end));
            }
        }
        if span.start == span.end {
            tags[span.start] = Tag::S;
        } else {
            tags[span.start] = Tag::B;
            for t in &mut tags[span.start + 1..span.end] {
                *t = Tag::I;
            }
            tags[span.end] = Tag::E;
        }
        prev = Some(span);
    }
    Ok(tags)
}

/// Result of decoding a (possibly malformed) tag sequence.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DecodedSpans {
    pub spans: Vec<Span>,
    /// Incomplete `B I*` fragments and stray `I`/`E` runs that were discarded.
    pub dropped_fragments: usize,
    /// Non-O tags not covered by any returned span.
    pub dropped_tags: usize,
}

/// Decode tags into spans. Total: fragments that never complete a `B … E`
/// or `S` pattern are dropped and counted.
pub fn decode_bioes_to_spans(tags: &[Tag]) -> DecodedSpans {
    let mut out = DecodedSpans::default();
    // Start of an open `B I*` run.
    let mut open: Option<usize> = None;
    // Whether the previous tag belonged to a stray fragment (I/E with no open B).
    let mut in_stray = false;

    let abandon = |out: &mut DecodedSpans, open: &mut Option<usize>, at: usize| {
        if let Some(s) = open.take() {
            out.dropped_fragments += 1;
            out.dropped_tags += at - s;
        }
    };

    for (i, &tag) in tags.iter().enumerate() {
        match tag {
            Tag::O => {
                abandon(&mut out, &mut open, i);
                in_stray = false;
            }
            Tag::S => {
                abandon(&mut out, &mut open, i);
                in_stray = false;
                out.spans.push(Span::new(i, i));
            }
            Tag::B => {
                abandon(&mut out, &mut open, i);
                in_stray = false;
                open = Some(i);
            }
            Tag::I => {
                if open.is_none() {
                    if !in_stray {
                        out.dropped_fragments += 1;
                    }
                    in_stray = true;
                    out.dropped_tags += 1;
                }
            }
            Tag::E => match open.take() {
                Some(s) => {
                    out.spans.push(Span::new(s, i));
                    in_stray = false;
                }
                None => {
                    if !in_stray {
                        out.dropped_fragments += 1;
                    }
                    out.dropped_tags += 1;
                    in_stray = false;
                }
            },
        }
    }
    abandon(&mut out, &mut open, tags.len());
    out
}

/// Allowed transitions of the BIOES grammar.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransitionMask {
    pub allowed: [[bool; NUM_TAGS]; NUM_TAGS],
    pub start_allowed: [bool; NUM_TAGS],
    pub end_allowed: [bool; NUM_TAGS],
}

impl TransitionMask {
    #[inline]
    pub fn allows(&self, from: Tag, to: Tag) -> bool {
        self.allowed[from.index()][to.index()]
    }

    /// Whether the mask accepts the whole path. The empty path is accepted.
    pub fn accepts(&self, path: &[Tag]) -> bool {
        match (path.first(), path.last()) {
            (None, _) | (_, None) => true,
            (Some(&first), Some(&last)) => {
                self.start_allowed[first.index()]
                    && self.end_allowed[last.index()]
                    && path.windows(2).all(|w| self.allows(w[0], w[1]))
            }
        }
    }
}

impl Default for TransitionMask {
    fn default() -> Self {
        build_transition_mask()
    }
}

pub fn build_transition_mask() -> TransitionMask {
    use Tag::*;
    let mut allowed = [[false; NUM_TAGS]; NUM_TAGS];
    let mut allow = |from: Tag, to: &[Tag]| {
        for &t in to {
            allowed[from.index()][t.index()] = true;
        }
    };
    allow(B, &[I, E]);
    allow(I, &[I, E]);
    allow(E, &[B, O, S]);
    allow(S, &[B, O, S]);
    allow(O, &[B, O, S]);

    let mut start_allowed = [false; NUM_TAGS];
    let mut end_allowed = [false; NUM_TAGS];
    for t in [B, O, S] {
        start_allowed[t.index()] = true;
    }
    for t in [E, O, S] {
        end_allowed[t.index()] = true;
    }
    TransitionMask { allowed, start_allowed, end_allowed }
}

/// Maximum-score tag path under the mask. `emissions[i][t]` is the log-score
/// of tag `t` at position `i`.
pub fn viterbi_decode(
    emissions: &[[f64; NUM_TAGS]],
    mask: &TransitionMask,
) -> Result<Vec<Tag>, TagError> {
    let len = emissions.len();
    if len == 0 {
        return Err(TagError::EmptyEmissions);
    }
    let penalty = |ok: bool| if ok { 0.0 } else { FORBIDDEN_PENALTY };

    let mut score = [0.0; NUM_TAGS];
    for t in 0..NUM_TAGS {
        score[t] = emissions[0][t] + penalty(mask.start_allowed[t]);
    }
    let mut back = vec![[0usize; NUM_TAGS]; len];

    for i in 1..len {
        let mut next = [f64::NEG_INFINITY; NUM_TAGS];
        for to in 0..NUM_TAGS {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for from in 0..NUM_TAGS {
                let s = score[from] + penalty(mask.allowed[from][to]);
                if s > best {
                    best = s;
                    arg = from;
                }
            }
            next[to] = best + emissions[i][to];
            back[i][to] = arg;
        }
        score = next;
    }

    let mut best = f64::NEG_INFINITY;
    let mut last = 0;
    for t in 0..NUM_TAGS {
        let s = score[t] + penalty(mask.end_allowed[t]);
        if s > best {
            best = s;
            last = t;
        }
    }

    let mut path = vec![Tag::O; len];
    let mut cur = last;
    for i in (0..len).rev() {
        path[i] = Tag::ALL[cur];
        cur = back[i][cur];
    }
    Ok(path)
}

pub fn tags_to_string(tags: &[Tag]) -> String {
    tags.iter().map(|t| t.as_str()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use Tag::*;

    #[test]
    fn encode_examples() {
        assert_eq!(encode_spans_to_bioes(4, &[Span::new(0, 1)]).unwrap(), vec![B, E, O, O]);
        assert_eq!(encode_spans_to_bioes(1, &[Span::new(0, 0)]).unwrap(), vec![S]);
        assert_eq!(encode_spans_to_bioes(3, &[Span::new(0, 2)]).unwrap(), vec![B, I, E]);
    }

    #[test]
    fn encode_rejects_overlap_and_range() {
        assert_eq!(
            encode_spans_to_bioes(5, &[Span::new(0, 2), Span::new(2, 3)]),
            Err(TagError::Overlap(0, 2, 2, 3))
        );
        assert!(matches!(
            encode_spans_to_bioes(3, &[Span::new(1, 3)]),
            Err(TagError::OutOfRange { .. })
        ));
    }

    #[test]
    fn decode_examples() {
        let d = decode_bioes_to_spans(&[B, I, E, O, S]);
        assert_eq!(d.spans, vec![Span::new(0, 2), Span::new(4, 4)]);
        assert_eq!(d.dropped_fragments, 0);
        assert!(decode_bioes_to_spans(&[O, O]).spans.is_empty());

        let d = decode_bioes_to_spans(&[I, E, O]);
        assert!(d.spans.is_empty());
        assert_eq!(d.dropped_fragments, 1);
        assert_eq!(d.dropped_tags, 2);
    }

    #[test]
    fn decode_drops_unterminated_begin() {
        let d = decode_bioes_to_spans(&[B, I, B, E, B]);
        assert_eq!(d.spans, vec![Span::new(2, 3)]);
        assert_eq!(d.dropped_fragments, 2);
        assert_eq!(d.dropped_tags, 3);
    }

    #[test]
    fn mask_examples() {
        let m = build_transition_mask();
        assert!(m.allows(B, I));
        assert!(!m.allows(B, S));
        assert!(!m.allows(I, B));
        assert!(!m.allows(S, I));
        assert!(!m.allows(O, E));
        assert!(m.accepts(&[]));
        assert!(m.accepts(&[B, I, E, S, O]));
        assert!(!m.accepts(&[I]));
        assert!(!m.accepts(&[B]));
    }

    #[test]
    fn viterbi_uniform_single_token_picks_lowest_legal_tag() {
        let m = build_transition_mask();
        // B is start-allowed but not end-allowed, so a length-1 path must be O or S.
        // The uniform case therefore resolves to the lowest legal index: O.
        let path = viterbi_decode(&[[0.0; 5]], &m).unwrap();
        assert_eq!(path, vec![O]);
    }

    #[test]
    fn viterbi_follows_strong_emissions() {
        let m = build_transition_mask();
        let mut e = [[-10.0; 5]; 2];
        e[0][B.index()] = 0.0;
        e[1][E.index()] = 0.0;
        assert_eq!(viterbi_decode(&e, &m).unwrap(), vec![B, E]);
    }

    #[test]
    fn viterbi_rejects_empty() {
        assert_eq!(viterbi_decode(&[], &build_transition_mask()), Err(TagError::EmptyEmissions));
    }
}
