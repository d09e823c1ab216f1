//! Hyperlink-annotated corpora: tokenization, `[[anchor]]` markup annotation
//! and JSON-lines dataset persistence.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tagging::{self, Span, Tag, TagError};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("unbalanced anchor marker at byte {0}")]
    Unbalanced(usize),
    #[error("nested anchor marker at byte {0}")]
    Nested(usize),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("sentence has neither tags nor spans")]
    Unlabeled,
    #[error("tags length {tags} does not match token count {tokens}")]
    LengthMismatch { tokens: usize, tags: usize },
    #[error(transparent)]
    Tag(#[from] TagError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A lowercased token with the byte range it occupies in the source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

fn is_punct(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

/// Lowercase, split on whitespace, and emit every punctuation character as
/// its own token. Offsets are byte offsets into `text`.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut out = Vec::new();
    let mut word_start: Option<usize> = None;
    let flush = |out: &mut Vec<Token>, start: &mut Option<usize>, end: usize| {
        if let Some(s) = start.take() {
            out.push(Token { text: text[s..end].to_lowercase(), start: s, end });
        }
    };
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            flush(&mut out, &mut word_start, i);
        } else if is_punct(c) {
            flush(&mut out, &mut word_start, i);
            let end = i + c.len_utf8();
            out.push(Token { text: text[i..end].to_lowercase(), start: i, end });
        } else if word_start.is_none() {
            word_start = Some(i);
        }
    }
    flush(&mut out, &mut word_start, text.len());
    out
}

pub fn tokenize_words(text: &str) -> Vec<String> {
    tokenize(text).into_iter().map(|t| t.text).collect()
}

/// Raw markup text whose entity mentions are wrapped as `[[anchor]]` or
/// `[[target|shown text]]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkupDocument {
    pub doc_id: String,
    pub text: String,
}

/// A token sequence with BIOES tags and/or typed spans.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSentence {
    pub tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tags: Option<Vec<Tag>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spans: Option<Vec<Span>>,
}

impl LabeledSentence {
    pub fn from_tags(tokens: Vec<String>, tags: Vec<Tag>) -> Self {
        Self { tokens, tags: Some(tags), spans: None }
    }

    /// Typed sentence; tags are derived from the spans.
    pub fn from_spans(tokens: Vec<String>, mut spans: Vec<Span>) -> Result<Self, CorpusError> {
        spans.sort();
        let tags = tagging::encode_spans_to_bioes(tokens.len(), &spans)?;
        Ok(Self { tokens, tags: Some(tags), spans: Some(spans) })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// BIOES tags, derived from spans when not stored.
    pub fn bioes(&self) -> Result<Vec<Tag>, CorpusError> {
        match (&self.tags, &self.spans) {
            (Some(t), _) => Ok(t.clone()),
            (None, Some(s)) => Ok(tagging::encode_spans_to_bioes(self.tokens.len(), s)?),
            (None, None) => Err(CorpusError::Unlabeled),
        }
    }

    /// Spans (typed when available, otherwise decoded from tags).
    pub fn entity_spans(&self) -> Vec<Span> {
        match (&self.spans, &self.tags) {
            (Some(s), _) => s.clone(),
            (None, Some(t)) => tagging::decode_bioes_to_spans(t).spans,
            (None, None) => Vec::new(),
        }
    }

    fn validate(&self) -> Result<(), CorpusError> {
        if self.tags.is_none() && self.spans.is_none() {
            return Err(CorpusError::Unlabeled);
        }
        if let Some(tags) = &self.tags {
            if tags.len() != self.tokens.len() {
                return Err(CorpusError::LengthMismatch { tokens: self.tokens.len(), tags: tags.len() });
            }
        }
        if let Some(spans) = &self.spans {
            tagging::encode_spans_to_bioes(self.tokens.len(), spans)?;
        }
        Ok(())
    }
}

/// A list of sentences plus the set of entity classes they mention.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dataset {
    pub sentences: Vec<LabeledSentence>,
    pub class_inventory: BTreeSet<String>,
}

impl Dataset {
    pub fn new(sentences: Vec<LabeledSentence>) -> Self {
        let class_inventory = sentences
            .iter()
            .filter_map(|s| s.spans.as_ref())
            .flatten()
            .filter_map(|sp| sp.label.clone())
            .collect();
        Self { sentences, class_inventory }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// A span-only view: labels dropped, tags kept.
    pub fn span_only(&self) -> Result<Dataset, CorpusError> {
        let sentences = self
            .sentences
            .iter()
            .map(|s| Ok(LabeledSentence::from_tags(s.tokens.clone(), s.bioes()?)))
            .collect::<Result<Vec<_>, CorpusError>>()?;
        Ok(Dataset::new(sentences))
    }
}

/// Output of [`annotate_hyperlinks`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Annotation {
    pub sentences: Vec<LabeledSentence>,
    /// Non-empty sentences dropped because they contained no anchor.
    pub discarded: usize,
}

struct Stripped {
    text: String,
    /// Byte ranges of anchors in `text`.
    anchors: Vec<(usize, usize)>,
}

fn strip_markup(markup: &str) -> Result<Stripped, CorpusError> {
    let bytes = markup.as_bytes();
    let mut text = String::with_capacity(markup.len());
    let mut anchors = Vec::new();
    let mut i = 0;
    let mut plain_from = 0;
    while i < bytes.len() {
        if bytes[i..].starts_with(b"[[") {
            text.push_str(&markup[plain_from..i]);
            let open = i;
            let body_start = i + 2;
            let mut j = body_start;
            let close = loop {
                if j >= bytes.len() {
                    return Err(CorpusError::Unbalanced(open));
                }
                if bytes[j..].starts_with(b"[[") {
                    return Err(CorpusError::Nested(j));
                }
                if bytes[j..].starts_with(b"]]") {
                    break j;
                }
                j += 1;
            };
            let body = &markup[body_start..close];
            let shown = body.rsplit('|').next().unwrap_or(body);
            let a = text.len();
            text.push_str(shown);
            anchors.push((a, text.len()));
            i = close + 2;
            plain_from = i;
        } else if bytes[i..].starts_with(b"]]") {
            return Err(CorpusError::Unbalanced(i));
        } else {
            i += 1;
        }
    }
    text.push_str(&markup[plain_from..]);
    Ok(Stripped { text, anchors })
}

/// Strip anchor markers, split sentences on `.?!` outside anchors, and tag each
/// anchor as one BIOES span. Sentences without anchors are discarded.
pub fn annotate_hyperlinks(doc: &MarkupDocument) -> Result<Annotation, CorpusError> {
    let Stripped { text, anchors } = strip_markup(&doc.text)?;
    let inside_anchor = |pos: usize| anchors.iter().any(|&(a, b)| pos >= a && pos < b);

    // Sentence byte ranges; terminators stay with their sentence.
    let mut sentence_ranges = Vec::new();
    let mut start = 0;
    for (i, c) in text.char_indices() {
        if matches!(c, '.' | '?' | '!') && !inside_anchor(i) {
            sentence_ranges.push((start, i + c.len_utf8()));
            start = i + c.len_utf8();
        }
    }
    sentence_ranges.push((start, text.len()));

    let mut out = Annotation::default();
    for (s, e) in sentence_ranges {
        // Cut points force token boundaries at anchor edges.
        let mut cuts = vec![s, e];
        for &(a, b) in &anchors {
            if a >= s && b <= e {
                cuts.push(a);
                cuts.push(b);
            }
        }
        cuts.sort_unstable();
        cuts.dedup();
        let mut tokens: Vec<Token> = Vec::new();
        for w in cuts.windows(2) {
            for mut t in tokenize(&text[w[0]..w[1]]) {
                t.start += w[0];
                t.end += w[0];
                tokens.push(t);
            }
        }
        if tokens.is_empty() {
            continue;
        }
        let mut spans = Vec::new();
        for &(a, b) in &anchors {
            if a < s || b > e {
                continue;
            }
            let covered: Vec<usize> = tokens
                .iter()
                .enumerate()
                .filter(|(_, t)| t.start >= a && t.end <= b)
                .map(|(k, _)| k)
                .collect();
            if let (Some(&first), Some(&last)) = (covered.first(), covered.last()) {
                spans.push(Span::new(first, last));
            }
        }
        if spans.is_empty() {
            out.discarded += 1;
            continue;
        }
        let words: Vec<String> = tokens.into_iter().map(|t| t.text).collect();
        let tags = tagging::encode_spans_to_bioes(words.len(), &spans)?;
        out.sentences.push(LabeledSentence::from_tags(words, tags));
    }
    Ok(out)
}

/// Annotate many documents; results are merged in document order.
pub fn annotate_documents(docs: &[MarkupDocument]) -> Result<Annotation, CorpusError> {
    use rayon::prelude::*;
    let parts: Vec<Annotation> = docs.par_iter().map(annotate_hyperlinks).collect::<Result<_, _>>()?;
    let mut out = Annotation::default();
    for p in parts {
        out.sentences.extend(p.sentences);
        out.discarded += p.discarded;
    }
    Ok(out)
}

pub fn write_sentences<W: Write>(mut w: W, sentences: &[LabeledSentence]) -> Result<(), CorpusError> {
    for s in sentences {
        serde_json::to_writer(&mut w, s).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn parse_sentence_record(line: &str, line_no: usize) -> Result<LabeledSentence, CorpusError> {
    let sentence: LabeledSentence = serde_json::from_str(line)
        .map_err(|e| CorpusError::Malformed { line: line_no, message: e.to_string() })?;
    sentence
        .validate()
        .map_err(|e| CorpusError::Malformed { line: line_no, message: e.to_string() })?;
    Ok(sentence)
}

pub fn read_sentences<R: BufRead>(r: R) -> Result<Vec<LabeledSentence>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_sentence_record(&line, i + 1)?);
    }
    Ok(out)
}

pub fn write_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    write_sentences(BufWriter::new(File::create(path)?), &dataset.sentences)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, CorpusError> {
    let sentences = read_sentences(BufReader::new(File::open(path)?))?;
    Ok(Dataset::new(sentences))
}

#[cfg(test)]
mod tests {
    use super::*;
    use Tag::*;

    fn words(text: &str) -> Vec<String> {
        tokenize_words(text)
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(words("New York."), ["new", "york", "."]);
        assert!(tokenize("").is_empty());
        assert_eq!(words("US-led"), ["us", "-", "led"]);
    }

    #[test]
    fn tokenize_offsets_index_source() {
        let text = "  Café, déjà-vu!";
        for t in tokenize(text) {
            assert_eq!(text[t.start..t.end].to_lowercase(), t.text);
        }
    }

    fn annotate(text: &str) -> Annotation {
        annotate_hyperlinks(&MarkupDocument { doc_id: "d".into(), text: text.into() }).unwrap()
    }

    #[test]
    fn annotate_examples() {
        let a = annotate("The [[Eiffel Tower]] is in [[Paris]].");
        assert_eq!(a.sentences.len(), 1);
        let s = &a.sentences[0];
        assert_eq!(s.tokens, ["the", "eiffel", "tower", "is", "in", "paris", "."]);
        assert_eq!(s.tags.as_deref().unwrap(), &[O, B, E, O, O, S, O]);

        let a = annotate("No links here.");
        assert!(a.sentences.is_empty());
        assert_eq!(a.discarded, 1);

        let a = annotate("[[A]] [[B C]].");
        assert_eq!(a.sentences[0].tags.as_deref().unwrap(), &[S, B, E, O]);
    }

    #[test]
    fn annotate_splits_sentences_and_keeps_dots_inside_anchors() {
        let a = annotate("We met in [[St. Louis]]. Nothing here! Then [[Rome|the Eternal City]]?");
        assert_eq!(a.sentences.len(), 2);
        assert_eq!(a.discarded, 1);
        assert_eq!(a.sentences[0].tokens, ["we", "met", "in", "st", ".", "louis", "."]);
        assert_eq!(a.sentences[0].tags.as_deref().unwrap(), &[O, O, O, B, I, E, O]);
        assert_eq!(a.sentences[1].tokens, ["then", "the", "eternal", "city", "?"]);
    }

    #[test]
    fn anchor_edges_split_tokens() {
        let a = annotate("[[Foo]]bar is here.");
        assert_eq!(a.sentences[0].tokens, ["foo", "bar", "is", "here", "."]);
        assert_eq!(a.sentences[0].tags.as_deref().unwrap(), &[S, O, O, O, O]);
    }

    #[test]
    fn markup_errors_name_offsets() {
        let doc = |t: &str| MarkupDocument { doc_id: "d".into(), text: t.into() };
        assert!(matches!(annotate_hyperlinks(&doc("a [[b")), Err(CorpusError::Unbalanced(2))));
        assert!(matches!(annotate_hyperlinks(&doc("a b]] c")), Err(CorpusError::Unbalanced(3))));
        assert!(matches!(annotate_hyperlinks(&doc("[[a [[b]] c]]")), Err(CorpusError::Nested(4))));
    }

    #[test]
    fn dataset_io_errors() {
        let bad = "{\"tokens\":[\"a\"],\"tags\":[\"O\"]}\n{\"tokens\":[\"a\"],\"tags\":[\"X\"]}\n";
        match read_sentences(bad.as_bytes()) {
            Err(CorpusError::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let missing = "{\"tokens\":[\"a\"]}\n";
        assert!(matches!(read_sentences(missing.as_bytes()), Err(CorpusError::Malformed { line: 1, .. })));
        assert!(read_sentences("".as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn dataset_inventory_tracks_labels() {
        let s = LabeledSentence::from_spans(
            words("paris is in france"),
            vec![Span::typed(0, 0, "location"), Span::typed(3, 3, "country")],
        )
        .unwrap();
        let d = Dataset::new(vec![s]);
        assert_eq!(d.class_inventory.iter().collect::<Vec<_>>(), ["country", "location"]);
    }
}
