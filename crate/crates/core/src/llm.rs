//! In-context-learning baseline: a three-section tagging prompt, a total
//! parser for tuple-formatted answers, and scoring.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::LabeledSentence;
use crate::episodes::Episode;
use crate::metrics::{micro_f1, span_f1, EvalReport, MetricsError};
use crate::referents::{LlmClient, ReferentError};
use crate::tagging::Span;

pub const OUTSIDE: &str = "O";

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("entity list is empty")]
    EmptyEntityList,
    #[error("no canned response for episode {0}")]
    MissingResponse(usize),
    #[error("response fixture line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error(transparent)]
    Referent(#[from] ReferentError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NerPrompt {
    pub entities: Vec<String>,
    pub definition: String,
    pub few_shot: String,
    pub query: String,
}

impl NerPrompt {
    pub fn render(&self) -> String {
        format!("{}\n\n{}\n\n{}", self.definition, self.few_shot, self.query)
    }
}

fn quote(s: &str) -> String {
    format!("'{}'", s.replace('\\', "\\\\").replace('\'', "\\'"))
}

/// `['a', 'b']`
pub fn render_list<S: AsRef<str>>(items: &[S]) -> String {
    let parts: Vec<String> = items.iter().map(|s| quote(s.as_ref())).collect();
    format!("[{}]", parts.join(", "))
}

/// `(['w', …], ['TAG', …])`
pub fn render_pair<S: AsRef<str>, T: AsRef<str>>(tokens: &[S], labels: &[T]) -> String {
    format!("({}, {})", render_list(tokens), render_list(labels))
}

/// One type label (or `O`) per token.
pub fn token_labels(sentence: &LabeledSentence) -> Vec<String> {
    let mut labels = vec![OUTSIDE.to_string(); sentence.len()];
    for sp in sentence.entity_spans() {
        let l = sp.label.clone().unwrap_or_else(|| OUTSIDE.to_string());
        for slot in labels.iter_mut().take(sp.end + 1).skip(sp.start) {
            *slot = l.clone();
        }
    }
    labels
}

pub fn build_ner_prompt(
    entities: &[String],
    support: &[LabeledSentence],
    queries: &[Vec<String>],
) -> Result<NerPrompt, LlmError> {
    if entities.is_empty() {
        return Err(LlmError::EmptyEntityList);
    }
    let list = render_list(entities);
    let definition = format!(
        "Definition: We have the following entity types in the entity type list {list}. We want to annotate each \
         word in the sentence using the above entity types. If a word does not belong to the above entity types, \
         we label it using the entity tag 'O'. We will provide some sentences and their corresponding entity type \
         label sequences as examples to improve your understanding."
    );
    let pairs: Vec<String> = support.iter().map(|s| render_pair(&s.tokens, &token_labels(s))).collect();
    let few_shot = format!("Few-shot Samples: The examples are as follows,[{}].", pairs.join(", "));
    let qs: Vec<String> = queries.iter().map(|q| render_list(q)).collect();
    let query = format!(
        "Query Request: Now we have the following query sentences, please label sentences with entity types {list} \
         or 'O' tag.({}). Each sentence result should have the following format: ([sentence words], [sentence \
         words entity labels]). For each sentence the prediction is a Python tuple,the first element is a Python \
         list containing sentence words, and the second element is the corresponding entity label for each \
         sentence word. The results should be several tuples separated by a single comma character.",
        qs.join(", ")
    );
    Ok(NerPrompt { entities: entities.to_vec(), definition, few_shot, query })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseStatus {
    /// A tuple with this exact token list and one known label per token.
    Ok,
    /// Matched, but by position, or with padding, truncation or unknown labels.
    Repaired,
    /// Nothing usable; labels are all `O`.
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedSentence {
    pub labels: Vec<String>,
    pub status: ParseStatus,
}

struct Cursor<'a> {
    s: &'a [u8],
    i: usize,
}

impl Cursor<'_> {
    fn ws(&mut self) {
        while self.i < self.s.len() && self.s[self.i].is_ascii_whitespace() {
            self.i += 1;
        }
    }

    fn eat(&mut self, c: u8) -> bool {
        self.ws();
        if self.s.get(self.i) == Some(&c) {
            self.i += 1;
            true
        } else {
            false
        }
    }

    fn string(&mut self) -> Option<String> {
        self.ws();
        let q = *self.s.get(self.i)?;
        if q != b'\'' && q != b'"' {
            return None;
        }
        self.i += 1;
        let mut out = Vec::new();
        while let Some(&c) = self.s.get(self.i) {
            self.i += 1;
            if c == b'\\' {
                out.push(*self.s.get(self.i)?);
                self.i += 1;
            } else if c == q {
                return String::from_utf8(out).ok();
            } else {
                out.push(c);
            }
        }
        None
    }

    fn list(&mut self) -> Option<Vec<String>> {
        if !self.eat(b'[') {
            return None;
        }
        let mut out = Vec::new();
        if self.eat(b']') {
            return Some(out);
        }
        loop {
            out.push(self.string()?);
            if self.eat(b']') {
                return Some(out);
            }
            if !self.eat(b',') {
                return None;
            }
        }
    }

    fn tuple(&mut self) -> Option<(Vec<String>, Vec<String>)> {
        if !self.eat(b'(') {
            return None;
        }
        let a = self.list()?;
        if !self.eat(b',') {
            return None;
        }
        let b = self.list()?;
        self.eat(b',');
        if !self.eat(b')') {
            return None;
        }
        Some((a, b))
    }
}

/// Every well-formed `([…], […])` tuple in `text`, in order.
pub fn extract_tuples(text: &str) -> Vec<(Vec<String>, Vec<String>)> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'(' {
            let mut c = Cursor { s: bytes, i };
            if let Some(t) = c.tuple() {
                out.push(t);
                i = c.i;
                continue;
            }
        }
        i += 1;
    }
    out
}

/// Labels for each query, never failing: tuples are matched to queries by
/// token list, then by position; labels are padded or truncated to the
/// query length with `O`, and labels outside `entities` become `O`.
pub fn parse_ner_response(text: &str, queries: &[Vec<String>], entities: &[String]) -> Vec<ParsedSentence> {
    let tuples = extract_tuples(text);
    let mut used = vec![false; tuples.len()];
    let mut assigned: Vec<Option<(usize, bool)>> = vec![None; queries.len()];
    for (qi, q) in queries.iter().enumerate() {
        if let Some(ti) = (0..tuples.len()).find(|&t| !used[t] && &tuples[t].0 == q) {
            used[ti] = true;
            assigned[qi] = Some((ti, true));
        }
    }
    for (qi, slot) in assigned.iter_mut().enumerate() {
        if slot.is_none() && qi < tuples.len() && !used[qi] {
            used[qi] = true;
            *slot = Some((qi, false));
        }
    }
    queries
        .iter()
        .zip(assigned)
        .map(|(q, a)| {
            let Some((ti, exact)) = a else {
                return ParsedSentence { labels: vec![OUTSIDE.to_string(); q.len()], status: ParseStatus::Failed };
            };
            let raw = &tuples[ti].1;
            let mut clean = raw.len() == q.len() && exact;
            let labels = (0..q.len())
                .map(|k| match raw.get(k) {
                    Some(l) if l == OUTSIDE || entities.contains(l) => l.clone(),
                    _ => {
                        clean = false;
                        OUTSIDE.to_string()
                    }
                })
                .collect();
            ParsedSentence { labels, status: if clean { ParseStatus::Ok } else { ParseStatus::Repaired } }
        })
        .collect()
}

/// Maximal runs of one non-`O` label become typed spans.
pub fn group_label_runs(labels: &[String]) -> Vec<Span> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < labels.len() {
        if labels[i] == OUTSIDE {
            i += 1;
            continue;
        }
        let start = i;
        while i + 1 < labels.len() && labels[i + 1] == labels[start] {
            i += 1;
        }
        out.push(Span::typed(start, i, labels[start].clone()));
        i += 1;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CannedResponse {
    pub episode_index: usize,
    pub response: String,
}

pub fn load_response_fixture(path: impl AsRef<Path>) -> Result<BTreeMap<usize, String>, LlmError> {
    let mut out = BTreeMap::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: CannedResponse =
            serde_json::from_str(&line).map_err(|e| LlmError::Malformed { line: i + 1, message: e.to_string() })?;
        out.insert(r.episode_index, r.response);
    }
    Ok(out)
}

pub enum ResponseSource<'a> {
    Fixture(&'a BTreeMap<usize, String>),
    Client(&'a LlmClient),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmEvaluation {
    pub typed: EvalReport,
    pub span_only: EvalReport,
    pub sentences: usize,
    pub flagged: usize,
    pub failed: usize,
}

pub fn evaluate_llm_baseline(episodes: &[Episode], source: ResponseSource<'_>) -> Result<LlmEvaluation, LlmError> {
    let (mut pred, mut gold) = (Vec::new(), Vec::new());
    let (mut flagged, mut failed) = (0, 0);
    for (i, ep) in episodes.iter().enumerate() {
        let queries: Vec<Vec<String>> = ep.query.iter().map(|s| s.tokens.clone()).collect();
        let response = match &source {
            ResponseSource::Fixture(map) => map.get(&i).cloned().ok_or(LlmError::MissingResponse(i))?,
            ResponseSource::Client(client) => {
                let prompt = build_ner_prompt(&ep.classes, &ep.support, &queries)?;
                client.complete(&format!("episode {i}"), &prompt.render())?
            }
        };
        for (parsed, q) in parse_ner_response(&response, &queries, &ep.classes).into_iter().zip(&ep.query) {
            match parsed.status {
                ParseStatus::Ok => {}
                ParseStatus::Repaired => flagged += 1,
                ParseStatus::Failed => {
                    flagged += 1;
                    failed += 1;
                }
            }
            pred.push(group_label_runs(&parsed.labels));
            gold.push(q.entity_spans());
        }
    }
    Ok(LlmEvaluation {
        typed: micro_f1(&pred, &gold)?,
        span_only: span_f1(&pred, &gold)?,
        sentences: pred.len(),
        flagged,
        failed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conll() -> Vec<String> {
        ["LOC", "MISC", "ORG", "PER"].map(String::from).to_vec()
    }

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn definition_lists_entities() {
        let p = build_ner_prompt(&conll(), &[], &[]).unwrap();
        assert!(p.definition.contains("entity type list ['LOC', 'MISC', 'ORG', 'PER']. We want"));
        assert!(p.query.contains("entity types ['LOC', 'MISC', 'ORG', 'PER'] or 'O' tag.()"));
        assert!(build_ner_prompt(&[], &[], &[]).is_err());
    }

    #[test]
    fn one_support_pair() {
        let s = LabeledSentence::from_spans(toks("in paris ."), vec![Span::typed(1, 1, "LOC")]).unwrap();
        let p = build_ner_prompt(&conll(), &[s], &[toks("boston")]).unwrap();
        assert!(p.few_shot.contains("[(['in', 'paris', '.'], ['O', 'LOC', 'O'])]"));
        assert!(p.query.contains("(['boston'])"));
    }

    #[test]
    fn parser_cases() {
        let q = vec![toks("paris")];
        assert_eq!(
            parse_ner_response("(['paris'], ['LOC'])", &q, &conll())[0],
            ParsedSentence { labels: vec!["LOC".into()], status: ParseStatus::Ok }
        );
        let short = parse_ner_response("(['a', 'b'], ['PER'])", &[toks("a b")], &conll());
        assert_eq!(short[0].labels, vec!["PER", "O"]);
        assert_eq!(short[0].status, ParseStatus::Repaired);
        let junk = parse_ner_response("I cannot help with that (", &[toks("a b"), toks("c")], &conll());
        assert!(junk.iter().all(|p| p.status == ParseStatus::Failed && p.labels.iter().all(|l| l == "O")));
        assert_eq!(junk[0].labels.len(), 2);
    }

    #[test]
    fn tuples_align_by_tokens_before_order() {
        let q = vec![toks("a"), toks("b")];
        let r = parse_ner_response("(['b'], ['ORG']), (['a'], ['PER'])", &q, &conll());
        assert_eq!((r[0].labels[0].as_str(), r[1].labels[0].as_str()), ("PER", "ORG"));
        let escaped = extract_tuples(r#"(["it's"], ['O'])"#);
        assert_eq!(escaped[0].0, vec!["it's".to_string()]);
    }

    #[test]
    fn grouping_runs() {
        let labels: Vec<String> = ["PER", "PER", "O", "LOC"].map(String::from).to_vec();
        assert_eq!(group_label_runs(&labels), vec![Span::typed(0, 1, "PER"), Span::typed(3, 3, "LOC")]);
    }

    #[test]
    fn echo_and_all_outside_fixtures() {
        let q = LabeledSentence::from_spans(toks("x paris y"), vec![Span::typed(1, 1, "LOC")]).unwrap();
        let ep = Episode {
            classes: conll(),
            support: vec![q.clone()],
            query: vec![q.clone()],
            support_ids: vec![],
            query_ids: vec![],
        };
        let echo: BTreeMap<usize, String> = [(0, render_pair(&q.tokens, &token_labels(&q)))].into();
        let r = evaluate_llm_baseline(std::slice::from_ref(&ep), ResponseSource::Fixture(&echo)).unwrap();
        assert_eq!((r.typed.f1(), r.flagged), (1.0, 0));
        let none: BTreeMap<usize, String> = [(0, "(['x', 'paris', 'y'], ['O', 'O', 'O'])".to_string())].into();
        assert_eq!(evaluate_llm_baseline(&[ep.clone()], ResponseSource::Fixture(&none)).unwrap().typed.f1(), 0.0);
        assert!(matches!(
            evaluate_llm_baseline(&[ep], ResponseSource::Fixture(&BTreeMap::new())),
            Err(LlmError::MissingResponse(0))
        ));
    }
}
